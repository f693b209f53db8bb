"""
Service layer for frequency-sampled evaluation of network transfer functions.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pandas as pd
import soundfile as sf
from django.conf import settings
from django.core.exceptions import ValidationError

from gfdn_core.models import FeedbackMatrix

from .exceptions import SingularTransferError
from .models import ComplexResponse, FrequencyGrid

logger = logging.getLogger(__name__)

IMAGINARY_RESIDUE_TOL = 1e-9


class TransferService:
    """Service for transfer-function sampling and inverse-DFT synthesis"""

    @staticmethod
    def choose_Q(t60_max, fs):
        """Smallest power of two covering T60_max * fs samples"""
        if t60_max <= 0 or fs <= 0:
            raise ValidationError(f'Decay time and sample rate must be positive, got {t60_max}, {fs}')
        return 2 ** max(1, math.ceil(math.log2(t60_max * fs)))

    @staticmethod
    def full_circle_angles(num_points):
        """
        Q points uniformly covering the whole unit circle, offset by half a bin
        so z = 1 and z = -1 are never sampled. Real orthogonal feedback
        matrices may have eigenvalues exactly there, which makes the lossless
        prototype singular.
        """
        return 2.0 * np.pi * (np.arange(num_points) + 0.5) / num_points

    @staticmethod
    def system_matrices(delays, line_gains, feedback, angles):
        """
        Stack of D_m^-1 Gamma^-1 - A over the sampled angles, shape (K, n, n).
        ``line_gains`` holds the per-sample absorption gain of every line.
        """
        delays = np.asarray(delays, dtype=float)
        exponent = 1j * np.outer(angles, delays) - delays * np.log(line_gains)
        systems = np.broadcast_to(-np.asarray(feedback, dtype=complex), (len(angles),) + feedback.shape).copy()
        idx = np.arange(delays.size)
        systems[:, idx, idx] += np.exp(exponent)
        return systems

    @staticmethod
    def solve(systems, rhs, angles):
        try:
            x = np.linalg.solve(systems, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            worst = int(np.argmax(np.linalg.cond(systems)))
            logger.error(f"Singular system matrix at bin {worst}")
            raise SingularTransferError(angles[worst])
        bad = ~np.all(np.isfinite(x), axis=-1)
        if np.any(bad):
            raise SingularTransferError(angles[int(np.argmax(bad))])
        return x

    @classmethod
    def eval_transfer(cls, params, grid, method='auto'):
        """
        Sample H(z) = c(x)^T (D^-1 Gamma^-1 - A)^-1 b(x) + d on the grid.

        ``method`` selects one N x N solve per point ('full'), G independent
        N' x N' solves for block-diagonal feedback ('grouped'), or picks the
        grouped path whenever it applies ('auto').
        """
        if method == 'auto':
            method = 'grouped' if params.feedback.kind == FeedbackMatrix.BLOCK_DIAGONAL else 'full'
        angles = grid.angles
        b = params.effective_input_gains
        c = params.effective_output_gains
        line_gains = params.absorption_gains[params.topology.group_index]
        delays = params.topology.delay_lengths

        if method == 'full':
            systems = cls.system_matrices(delays, line_gains, params.feedback.matrix, angles)
            rhs = np.broadcast_to(b.astype(complex), (len(angles), b.size))
            values = cls.solve(systems, rhs, angles) @ c
        elif method == 'grouped':
            if params.feedback.kind != FeedbackMatrix.BLOCK_DIAGONAL:
                raise ValidationError('The grouped evaluation path needs block-diagonal feedback')
            values = np.zeros(len(angles), dtype=complex)
            for k in range(params.topology.num_groups):
                sl = params.topology.group_slice(k)
                systems = cls.system_matrices(delays[sl], line_gains[sl], params.feedback.block(k, k), angles)
                rhs = np.broadcast_to(b[sl].astype(complex), (len(angles), b[sl].size))
                values += cls.solve(systems, rhs, angles) @ c[sl]
        else:
            raise ValidationError(f'Unknown evaluation method {method!r}')

        return ComplexResponse(grid=grid, values=values + params.direct_gain)

    @classmethod
    def eval_group_responses(cls, params, angles, lossless=False):
        """
        Per-group responses c_k^T (D^-1 Gamma^-1 - M_k^2)^-1 b_k with unit
        position gains, shape (G, K).
        """
        if params.feedback.kind != FeedbackMatrix.BLOCK_DIAGONAL:
            raise ValidationError('Group responses need block-diagonal feedback')
        topology = params.topology
        responses = np.empty((topology.num_groups, len(angles)), dtype=complex)
        for k in range(topology.num_groups):
            sl = topology.group_slice(k)
            gain = 1.0 if lossless else params.absorption_gains[k]
            systems = cls.system_matrices(
                topology.delay_lengths[sl],
                np.full(topology.delays_per_group, gain),
                params.feedback.block(k, k),
                angles,
            )
            rhs = np.broadcast_to(params.input_gains[sl].astype(complex), (len(angles), topology.delays_per_group))
            responses[k] = cls.solve(systems, rhs, angles) @ params.output_gains[sl]
        return responses

    @classmethod
    def eval_transfer_parallel(cls, params, grid, workers=None):
        """Evaluate disjoint bin ranges on a thread pool and concatenate them"""
        workers = workers or settings.GFDN_NUM_THREADS
        pieces = grid.partition(workers)
        with ThreadPoolExecutor(max_workers=workers) as executor:
            responses = list(executor.map(lambda piece: cls.eval_transfer(params, piece), pieces))
        return ComplexResponse.concatenate(responses)

    @staticmethod
    def response_to_rir(response):
        """
        Real impulse response of length Q from half-circle samples, completing
        the conjugate-symmetric half internally.
        """
        grid = response.grid
        if not grid.is_complete:
            raise ValidationError('Inverse DFT needs the complete half-circle grid')
        half = response.values
        full = np.concatenate([half, np.conj(half[-2:0:-1])])
        h = np.fft.ifft(full)
        norm = np.linalg.norm(h.real)
        residue = np.linalg.norm(h.imag)
        if norm > 0 and residue > IMAGINARY_RESIDUE_TOL * norm:
            logger.warning(f"Imaginary residue {residue / norm:.2e} of the inverse DFT discarded")
        return h.real

    @staticmethod
    def rir_to_response(h, sample_rate):
        """Forward DFT of a length-Q signal onto its half-circle grid"""
        h = np.asarray(h, dtype=float)
        grid = FrequencyGrid(num_points=h.size, sample_rate=sample_rate)
        return ComplexResponse(grid=grid, values=np.fft.rfft(h))


class RIRExportService:
    """Service for writing rendered impulse responses to disk"""

    @staticmethod
    def write_wav(path, h, sample_rate, config_hash=''):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with sf.SoundFile(path, mode='w', samplerate=int(sample_rate), channels=1, subtype='FLOAT', format='WAV') as f:
            if config_hash:
                f.comment = f'config_hash={config_hash}'
            f.write(np.asarray(h, dtype=np.float32))
        logger.info(f"Wrote {len(h)}-sample RIR to {path}")
        return path

    @staticmethod
    def write_csv(path, h, config_hash=''):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame = pd.DataFrame({'sample': np.arange(len(h)), 'amplitude': np.asarray(h, dtype=float)})
        if config_hash:
            frame['config_hash'] = config_hash
        frame.to_csv(path, index=False)
        return path
