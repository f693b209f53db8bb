"""
Service layer for the common-slopes decay model and the operation and memory
cost counts.
"""
import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy.optimize import least_squares, nnls
from scipy.signal import fftconvolve

from analysis.exceptions import UndefinedDecayError
from analysis.services import DecayAnalysisService
from cli_io.models import RIRDataset
from filterbank.services import FilterBankService

from .models import ENERGY_DECAY_CONSTANT, DecayModel

logger = logging.getLogger(__name__)

ILL_CONDITIONED = 1e6
RIDGE = 1e-6
FIT_POINTS = 2000
FIT_FLOOR = 1e-30
T60_BOUNDS = (1e-3, 100.0)


class CommonSlopesService:
    """Service for decay-model curves, amplitude fitting and RIR synthesis"""

    @staticmethod
    def decay_basis(t60s, fs, length):
        """Columns Psi_k(n) - Psi_k(L) for n < L, shape (L, G)"""
        t60s = np.atleast_1d(np.asarray(t60s, dtype=float))
        if np.any(t60s <= 0):
            raise ValidationError(f'Decay times must be positive, got {t60s.tolist()}')
        n = np.arange(length + 1, dtype=float)
        kernel = np.exp(-np.outer(n, ENERGY_DECAY_CONSTANT / (t60s * fs)))
        return kernel[:length] - kernel[length]

    @classmethod
    def cs_edc(cls, model, x, band, length):
        """Linear-energy decay curve d_b(x, n) = sum_k A_{k,b}(x) (Psi_{k,b}(n) - Psi_{k,b}(L))"""
        if not 0 <= band < model.num_bands:
            raise ValidationError(f'Band {band} is out of range for {model.num_bands} bands')
        amplitudes = model.amplitudes_at(x)[:, band]
        return cls.decay_basis(model.t60_table[:, band], model.sample_rate, length) @ amplitudes

    @staticmethod
    def _nnls(basis, target):
        """NNLS on unit-norm columns, ridge-regularized when the columns are nearly collinear"""
        scale = np.linalg.norm(basis, axis=0)
        scale[scale == 0] = 1.0
        columns = basis / scale
        condition = np.linalg.cond(columns)
        if condition > ILL_CONDITIONED:
            logger.warning(f"Decay basis is ill-conditioned (cond {condition:.2e}); regularizing the fit")
            weight = np.sqrt(RIDGE) * max(np.linalg.norm(target), 1.0)
            columns = np.vstack([columns, weight * np.eye(columns.shape[1])])
            target = np.concatenate([target, np.zeros(basis.shape[1])])
        coef, _ = nnls(columns, target)
        return coef / scale

    @classmethod
    def fit_amplitudes(cls, edc_refs, t60_table, fs):
        """
        Non-negative amplitudes A_{k,b} of every band's reference EDC (linear
        energy, shape (B, L)) against the fixed decay kernels. Returns the
        (G, B) amplitudes and the relative residual norm of every band.
        """
        edc_refs = np.atleast_2d(np.asarray(edc_refs, dtype=float))
        t60_table = np.atleast_2d(np.asarray(t60_table, dtype=float))
        if edc_refs.shape[0] != t60_table.shape[1]:
            raise ValidationError(f'{edc_refs.shape[0]} reference curves for {t60_table.shape[1]} bands')
        if np.any(edc_refs < 0) or not np.all(np.isfinite(edc_refs)):
            raise ValidationError('Reference EDCs must be finite linear energies')

        length = edc_refs.shape[1]
        amplitudes = np.zeros(t60_table.shape)
        residuals = np.zeros(edc_refs.shape[0])
        for b, target in enumerate(edc_refs):
            basis = cls.decay_basis(t60_table[:, b], fs, length)
            amplitudes[:, b] = cls._nnls(basis, target)
            norm = np.linalg.norm(target)
            if norm > 0:
                residuals[b] = np.linalg.norm(basis @ amplitudes[:, b] - target) / norm
        return amplitudes, residuals

    @staticmethod
    def _initial_decay_times(edcs, fs, num_slopes):
        mean_db = DecayAnalysisService.to_db(np.mean(edcs / edcs[:, :1], axis=0))
        estimates = []
        for start, stop in ((-1.0, -10.0), (-30.0, -50.0), (-5.0, -35.0)):
            try:
                estimates.append(DecayAnalysisService.schroeder_decay_slope(mean_db, fs, start, stop)[1])
            except ValidationError:
                continue
        if not estimates:
            raise ValidationError('Reference EDCs decay too little to estimate decay times')
        early, late = min(estimates), max(estimates)
        if num_slopes == 1:
            return np.array([np.sqrt(early * late)])
        if late < 1.2 * early:
            early, late = early / 1.2, late * 1.2
        return np.geomspace(early, late, num_slopes)

    @classmethod
    def fit_common_decay_times(cls, edcs, num_slopes, fs, max_points=FIT_POINTS):
        """
        Least-squares decay times shared by all positions of one band. Every
        candidate set is scored by the dB misfit above -60 dB after fitting
        each position's amplitudes by NNLS. Returns ascending T60s.
        """
        edcs = np.atleast_2d(np.asarray(edcs, dtype=float))
        edcs = edcs[edcs[:, 0] > 0]
        if not edcs.shape[0]:
            raise UndefinedDecayError('No position has energy in this band')
        length = edcs.shape[1]
        idx = np.unique(np.linspace(0, length - 1, min(max_points, length)).astype(int))
        targets_db = DecayAnalysisService.to_db(edcs)
        masks = [idx < DecayAnalysisService.truncation_index(curve) for curve in targets_db]

        def residuals(log_t60):
            basis = cls.decay_basis(np.exp(log_t60), fs, length)[idx]
            out = []
            for target, target_db, mask in zip(edcs, targets_db, masks):
                coef, _ = nnls(basis / basis[0], target[idx])
                fitted = 10.0 * np.log10(np.maximum(basis / basis[0] @ coef, FIT_FLOOR))
                out.append((fitted - target_db[idx])[mask])
            return np.concatenate(out)

        initial = cls._initial_decay_times(edcs, fs, num_slopes)
        bounds = np.log(T60_BOUNDS)
        solution = least_squares(residuals, np.log(np.clip(initial, *T60_BOUNDS)), bounds=tuple(bounds))
        t60s = np.sort(np.exp(solution.x))
        logger.info(f"Fitted common decay times {np.round(t60s, 4).tolist()} s (cost {solution.cost:.3g})")
        return t60s

    @staticmethod
    def synthesis_bank(model, fir_order=None):
        return FilterBankService.design_bank(model.sample_rate, model.num_bands, fir_order,
                                             base_hz=model.band_centers[0])

    @classmethod
    def cs_synthesize_rir(cls, model, x, length, rng, bank=None):
        """
        sum_b sum_k sqrt(A_{k,b} Psi_{k,b}(n) (1 - e^{-r_{k,b}})) c_{k,b}(n), with
        c_{k,b} Gaussian noise filtered by band b and scaled to unit mean
        square. The decrement factor makes the expected Schroeder integral of
        each band equal the model EDC.
        """
        amplitudes = model.amplitudes_at(x)
        bank = bank or cls.synthesis_bank(model)
        if bank.num_bands != model.num_bands:
            raise ValidationError(f'{bank.num_bands}-band bank for a {model.num_bands}-band model')

        rates = ENERGY_DECAY_CONSTANT / (model.t60_table * model.sample_rate)
        n = np.arange(length)
        h = np.zeros(length)
        for b in range(model.num_bands):
            for k in range(model.num_slopes):
                noise = rng.standard_normal(length + bank.fir_order)
                if amplitudes[k, b] == 0:
                    continue
                carrier = fftconvolve(noise, bank.taps[b], mode='valid')
                carrier /= np.sqrt(np.mean(carrier ** 2))
                envelope = np.sqrt(amplitudes[k, b] * np.exp(-rates[k, b] * n) * -np.expm1(-rates[k, b]))
                h += envelope * carrier
        return h

    @classmethod
    def make_synthetic_dataset(cls, room, grid, rng, bank=None, workers=None):
        """
        RIRs synthesized on every grid point from the room's amplitude
        fields, with the generating decay model attached as ground truth.
        Positions are rendered in parallel from independent child streams.
        """
        positions = grid.positions()
        model = DecayModel(
            t60_table=room.t60_table,
            band_centers=room.band_centers,
            sample_rate=room.sample_rate,
            positions=positions,
            amplitudes=room.amplitude_field(positions),
        )
        bank = bank or cls.synthesis_bank(model)
        streams = rng.spawn(model.num_positions)
        length = room.num_samples

        workers = workers or settings.GFDN_NUM_THREADS
        with ThreadPoolExecutor(max_workers=workers) as executor:
            rirs = list(executor.map(
                lambda i: cls.cs_synthesize_rir(model, positions[i], length, streams[i], bank),
                range(model.num_positions),
            ))
        logger.info(f"Synthesized {model} with {length} samples per RIR")
        return RIRDataset(
            sample_rate=room.sample_rate,
            source_position=np.array(room.source_position),
            receiver_positions=positions,
            rirs=np.stack(rirs),
            t60_table=room.t60_table,
            band_centers=room.band_centers,
            ground_truth=model,
            metadata={'generator': 'common_slopes', 'grid': [grid.nx, grid.ny], 'fir_order': bank.fir_order},
        )

    @staticmethod
    def band_energy_decays(h, bank):
        """
        Linear EDCs of every band of ``h`` after removing the bank's group
        delay, shape (B, len(h)). Silent bands give all-zero curves.
        """
        h = np.asarray(h, dtype=float)
        delay = bank.group_delay
        curves = np.zeros((bank.num_bands, h.size))
        for b in range(bank.num_bands):
            band = FilterBankService.split_band(h, bank, b)[delay:delay + h.size]
            try:
                curves[b] = DecayAnalysisService.energy_decay(band)
            except UndefinedDecayError:
                logger.warning(f"Band {b} is silent; its amplitudes fit to zero")
        return curves

    @classmethod
    def fit_dataset(cls, dataset, bank=None, t60_table=None, num_slopes=None):
        """
        Decay model of a dataset: common decay times from ``t60_table``, the
        dataset's own table, or a least-squares fit, then NNLS amplitudes at
        every receiver.
        """
        t60_table = dataset.t60_table if t60_table is None else np.atleast_2d(t60_table)
        centers = dataset.band_centers
        if bank is None:
            if centers is None:
                raise ValidationError('Band centres are needed to design the analysis bank')
            bank = FilterBankService.design_bank(dataset.sample_rate, centers.size, base_hz=centers[0])
        fs = dataset.sample_rate
        curves = np.stack([cls.band_energy_decays(h, bank) for h in dataset.rirs])

        if t60_table is None:
            if not num_slopes:
                raise ValidationError('Either decay times or a slope count are required')
            t60_table = np.stack([
                cls.fit_common_decay_times(curves[:, b], num_slopes, fs) for b in range(bank.num_bands)
            ], axis=1)

        amplitudes = []
        for p, band_curves in enumerate(curves):
            fitted, residuals = cls.fit_amplitudes(band_curves, t60_table, fs)
            if np.any(residuals > 0.1):
                logger.warning(f"Position {p}: relative fit residuals {np.round(residuals, 3).tolist()}")
            amplitudes.append(fitted)
        return DecayModel(
            t60_table=t60_table,
            band_centers=bank.center_freqs,
            sample_rate=fs,
            positions=dataset.receiver_positions,
            amplitudes=np.stack(amplitudes),
        )


class CostModelService:
    """Exact integer operation and parameter counts of the renderers"""

    @staticmethod
    def flops_parallel_gfdn(B, N):
        """Operations per sample of B parallel frequency-independent networks with N delay lines"""
        return 2 * B * N * N + 4 * N * B + B

    @staticmethod
    def flops_fdn(N_group, P, Q_ops):
        """One network of N' lines whose delay-line filters cost P and Q_ops operations"""
        return 2 * N_group * N_group + N_group * (P + 1) + 2 * N_group * Q_ops + 1

    @staticmethod
    def flops_cs_renderer(G, M, B):
        """Operations per sample of a modal renderer with M modes per slope over B bands"""
        return 9 * G * (M + B)

    @staticmethod
    def flops_mlp(N_layer, A, F):
        return N_layer * (2 * A * A + A) + (2 * A * F + F)

    @staticmethod
    def flops_mlp_bank(B, N_layer, A, G):
        """B MLPs with G outputs each, producing source and receiver gains"""
        return B * (N_layer * (2 * A * A + A) + 2 * G * (2 * A + 1))

    @staticmethod
    def params_mlp(N_layer, A, G):
        return N_layer * (A * A + A) + 2 * G * (A + 1)

    @staticmethod
    def params_gfdn(N, N_group, G, tau):
        """Delay memory of mean length tau, gains, absorption and one mixing block"""
        return N * (tau + 2) + 3 * G + N_group * N_group

    @classmethod
    def memory_footprint(cls, B, N, N_group, G, tau, N_layer, A):
        return B * (cls.params_mlp(N_layer, A, G) + cls.params_gfdn(N, N_group, G, tau))

    @classmethod
    def cost_table(cls, inputs):
        """Every count for one CostModelInput as a (quantity, value) table"""
        i = inputs
        gfdn = cls.flops_parallel_gfdn(i.B, i.N)
        cs = cls.flops_cs_renderer(i.G, i.M, i.B)
        rows = [
            ('flops_parallel_gfdn', gfdn),
            ('flops_fdn', cls.flops_fdn(i.N_group, i.P, i.Q_ops)),
            ('flops_cs_renderer', cs),
            ('flops_mlp', cls.flops_mlp(i.N_layer, i.A, i.F)),
            ('flops_mlp_bank', cls.flops_mlp_bank(i.B, i.N_layer, i.A, i.G)),
            ('params_mlp', cls.params_mlp(i.N_layer, i.A, i.G)),
            ('params_gfdn', cls.params_gfdn(i.N, i.N_group, i.G, i.tau)),
            ('memory_footprint', cls.memory_footprint(i.B, i.N, i.N_group, i.G, i.tau, i.N_layer, i.A)),
        ]
        frame = pd.DataFrame(rows, columns=['quantity', 'value'])
        if gfdn:
            logger.info(f"CS renderer needs {cs / gfdn:.1f}x the operations of the parallel networks")
        return frame
