"""
Differentiable training losses recorded on a Tape.
"""
import logging

import numpy as np
from django.core.exceptions import ValidationError
from scipy.signal import get_window

from analysis.services import DecayAnalysisService

logger = logging.getLogger(__name__)

ENERGY_FLOOR = 1e-20
MAX_MASK_DRAWS = 100


class LossService:
    """Service for the EDC, EDR, spectral and sparsity losses"""

    @staticmethod
    def decay_db(tape, energy):
        """10 log10 of a non-negative energy, floored at -200 dB like the analysis curves"""
        return 10.0 * tape.log10(tape.maximum(energy, ENERGY_FLOOR))

    @staticmethod
    def edc_mask(n60, mask_prob, rng):
        """Bernoulli(mask_prob) retained indices below n60, redrawn while empty"""
        for _ in range(MAX_MASK_DRAWS):
            keep = np.flatnonzero(rng.random(n60) < mask_prob)
            if keep.size:
                return keep
            logger.warning(f"EDC mask over {n60} samples came out empty; resampling")
        raise ValidationError(f'Could not draw a non-empty EDC mask with p = {mask_prob}')

    @classmethod
    def loss_edc(cls, tape, edc_ref_db, y_hat, mask_prob, rng):
        """
        Mean absolute dB difference between the reference EDC and the EDC of
        ``y_hat`` over randomly retained samples before the reference's -60 dB
        point. Only ``y_hat`` is differentiated.
        """
        edc_ref_db = np.asarray(edc_ref_db, dtype=float)
        if edc_ref_db.size != y_hat.shape[-1]:
            raise ValidationError(f'Reference EDC has {edc_ref_db.size} samples, estimate has {y_hat.shape[-1]}')
        n60 = DecayAnalysisService.truncation_index(edc_ref_db)
        keep = cls.edc_mask(n60, mask_prob, rng)
        edc_hat = cls.decay_db(tape, tape.rev_cumsum(tape.square(y_hat)))
        return tape.mean(tape.abs(tape.take(edc_hat, keep) - edc_ref_db[keep]))

    @classmethod
    def loss_edr(cls, tape, edr_ref_db, y_hat, window, hop, frames=None):
        """
        sum |EDR_ref - EDR_hat| / sum |EDR_ref| over bins and the first
        ``frames`` frames. ``edr_ref_db`` is laid out (bins, frames) like
        the analysis relief.
        """
        edr_ref_db = np.asarray(edr_ref_db, dtype=float)
        bins, num_frames = edr_ref_db.shape
        if bins != window // 2 + 1 or y_hat.shape[-1] < window + (num_frames - 1) * hop:
            raise ValidationError('Reference EDR does not match the estimate\'s STFT grid')
        frames = num_frames if frames is None else frames
        reference = edr_ref_db[:, :frames].T
        mass = np.sum(np.abs(reference))
        if mass == 0.0:
            raise ValidationError('Reference EDR is identically 0 dB; the normalization is undefined')

        index = hop * np.arange(num_frames)[:, None] + np.arange(window)[None, :]
        segments = tape.take(y_hat, index) * get_window('hann', window)
        power = tape.abs2(tape.rfft(segments, window))
        relief = cls.decay_db(tape, tape.rev_cumsum(power, axis=0))
        return tape.sum(tape.abs(relief[:frames] - reference)) / mass

    @staticmethod
    def loss_spectral(tape, responses):
        """Per-group mean of (|H_k| - 1)^2 over the sampled lossless responses, shape (G,)"""
        return tape.mean(tape.square(tape.abs(responses) - 1.0), axis=-1)

    @staticmethod
    def loss_sparsity(tape, mixing):
        """
        Per-group density penalty (N' sqrt(N') - sum |M_k|) / (N' sqrt(N') - 1),
        shape (G,). Zero for a maximally dense orthogonal block, and for N' = 1.
        """
        n = mixing.shape[-1]
        ceiling = n * np.sqrt(n)
        total = tape.sum(tape.sum(tape.abs(mixing), axis=-1), axis=-1)
        if n == 1:
            return total * 0.0
        return (ceiling - total) / (ceiling - 1.0)

    @staticmethod
    def total_loss(weights, edc_terms, edr_terms, spectral, sparsity):
        """
        Weighted sum of batch-averaged EDC and EDR losses and the summed
        per-group spectral and sparsity losses. Works on floats or Variables.
        """
        if not len(edc_terms) or len(edc_terms) != len(edr_terms):
            raise ValidationError('A batch needs at least one item with both decay losses')
        edc = sum(edc_terms) / len(edc_terms)
        edr = sum(edr_terms) / len(edr_terms)
        return weights.edc * edc + weights.edr * edr + weights.spectral * spectral + weights.sparsity * sparsity
