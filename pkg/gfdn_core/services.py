"""
Service layer for constructing grouped feedback delay networks.
"""
import logging
import math

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError
from scipy.linalg import expm

from .feedback_creators import BlockDiagonalFeedbackCreator, CoupledFeedbackCreator
from .models import GFDNParams, GroupTopology

logger = logging.getLogger(__name__)

# 60 dB expressed in nepers of amplitude: ln(10 ** 3)
DECAY_CONSTANT = 6.91


class GFDNService:
    """Service for network parameters, feedback matrices and gain updates"""

    @staticmethod
    def t60_to_absorption_gain(t60, delay_m, fs):
        """
        Linear gain that realizes a decay time over one traversal of a delay line.
        Accepts scalars or arrays for t60 and delay_m.
        """
        t60 = np.asarray(t60, dtype=float)
        delay_m = np.asarray(delay_m, dtype=float)
        if np.any(t60 <= 0) or not np.all(np.isfinite(t60)):
            raise ValidationError(f'Decay time must be positive and finite, got {t60}')
        if fs <= 0:
            raise ValidationError(f'Sample rate must be positive, got {fs}')
        if np.any(delay_m < 1):
            raise ValidationError(f'Delay length must be at least one sample, got {delay_m}')
        gain = np.exp(-DECAY_CONSTANT * delay_m / (fs * t60))
        return float(gain) if gain.ndim == 0 else gain

    @staticmethod
    def absorption_gain_db(t60, delay_m, fs):
        if t60 <= 0 or fs <= 0:
            raise ValidationError(f'Decay time and sample rate must be positive, got {t60}, {fs}')
        return -60.0 * delay_m / (fs * t60)

    @staticmethod
    def build_orthogonal_from_skew(W):
        """Orthogonal matrix expm(U - U^T) from the strictly upper triangle U of W"""
        W = np.asarray(W, dtype=float)
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ValidationError(f'W must be square, got shape {W.shape}')
        upper = np.triu(W, 1)
        return expm(upper - upper.T)

    @staticmethod
    def random_orthogonal(n, rng):
        """Haar-distributed orthogonal matrix via QR of a Gaussian matrix"""
        q, r = np.linalg.qr(rng.standard_normal((n, n)))
        return q * np.sign(np.diag(r))

    @staticmethod
    def coupling_rotation(num_groups, angle):
        """Rotation by ``angle`` in the plane of the first two groups"""
        coupling = np.eye(num_groups)
        if num_groups < 2:
            return coupling
        c, s = math.cos(angle), math.sin(angle)
        coupling[:2, :2] = [[c, -s], [s, c]]
        return coupling

    @staticmethod
    def assemble_feedback(coupling, mixing_blocks):
        """
        Assemble the feedback matrix. Identity coupling yields the block-diagonal
        kind, anything else the coupled kind.
        """
        g = len(mixing_blocks)
        coupling = np.asarray(coupling, dtype=float)
        if coupling.shape == (g, g) and np.array_equal(coupling, np.eye(g)):
            creator = BlockDiagonalFeedbackCreator()
        else:
            creator = CoupledFeedbackCreator()
        return creator.create_product(mixing_blocks, coupling)

    @staticmethod
    def default_delay_lengths(num_delays, fs, seed=0, delay_range_s=None, max_attempts=10000):
        """
        Pairwise coprime delay lengths drawn from [floor(lo * fs), floor(hi * fs)]
        by a seeded randomized search.
        """
        lo_s, hi_s = delay_range_s or settings.GFDN['delay_range_s']
        lo, hi = int(math.floor(lo_s * fs)), int(math.floor(hi_s * fs))
        if num_delays < 1 or lo < 1 or hi < lo:
            raise ValidationError(f'Cannot draw {num_delays} delays from [{lo}, {hi}] samples')

        rng = np.random.default_rng(seed)
        chosen = []
        for _ in range(max_attempts):
            candidate = int(rng.integers(lo, hi + 1))
            if all(math.gcd(candidate, m) == 1 for m in chosen):
                chosen.append(candidate)
                if len(chosen) == num_delays:
                    return np.array(chosen, dtype=np.int64)

        raise ValidationError(
            f'Could not find {num_delays} coprime delays in [{lo}, {hi}] after {max_attempts} draws'
        )

    @staticmethod
    def make_params(topology, feedback, input_gains, output_gains, absorption_gains,
                    source_gains=None, receiver_gains=None, direct_gain=0.0):
        return GFDNParams(
            topology=topology,
            feedback=feedback,
            input_gains=input_gains,
            output_gains=output_gains,
            absorption_gains=absorption_gains,
            source_gains=source_gains,
            receiver_gains=receiver_gains,
            direct_gain=direct_gain,
        )

    @classmethod
    def random_network(cls, num_groups, delays_per_group, fs, t60s, rng, delay_lengths=None,
                       coupling=None):
        """
        Random network with mixing blocks drawn from skew-symmetric exponentials
        and input/output gains drawn like an untrained model.
        """
        n = num_groups * delays_per_group
        if delay_lengths is None:
            delay_lengths = cls.default_delay_lengths(n, fs, seed=int(rng.integers(2 ** 31)))
        topology = GroupTopology(num_groups, delays_per_group, delay_lengths)

        blocks = [
            cls.build_orthogonal_from_skew(rng.uniform(-1.0, 1.0, (delays_per_group, delays_per_group)))
            for _ in range(num_groups)
        ]
        feedback = cls.assemble_feedback(np.eye(num_groups) if coupling is None else coupling, blocks)
        gains = cls.t60_to_absorption_gain(np.broadcast_to(np.asarray(t60s, dtype=float), (num_groups,)), 1, fs)

        return cls.make_params(
            topology,
            feedback,
            input_gains=rng.uniform(-1.0, 1.0, n),
            output_gains=rng.uniform(-1.0, 1.0, n),
            absorption_gains=np.atleast_1d(gains),
        )

    @staticmethod
    def update_position_gains(params, g_i_new, g_o_new):
        """Replace only the source and receiver gains"""
        g = params.topology.num_groups
        g_i_new = np.asarray(g_i_new, dtype=float).ravel()
        g_o_new = np.asarray(g_o_new, dtype=float).ravel()
        if g_i_new.size != g or g_o_new.size != g:
            raise ValidationError(
                f'Position gains must have {g} entries, got {g_i_new.size} and {g_o_new.size}'
            )
        return params.with_position_gains(g_i_new, g_o_new)
