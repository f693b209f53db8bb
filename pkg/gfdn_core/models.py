import logging
from dataclasses import dataclass, field, replace
from typing import ClassVar

import numpy as np
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)

ORTHOGONALITY_TOL = 1e-10
ASSEMBLED_ORTHOGONALITY_TOL = 1e-9


def _orthogonality_error(matrix):
    matrix = np.asarray(matrix, dtype=float)
    return float(np.linalg.norm(matrix.T @ matrix - np.eye(matrix.shape[0]), 'fro'))


@dataclass(frozen=True)
class GroupTopology:
    """Delay-line layout of a grouped network"""

    num_groups: int
    delays_per_group: int
    delay_lengths: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'delay_lengths', np.asarray(self.delay_lengths, dtype=np.int64).ravel())
        self.clean()

    def __str__(self):
        return f"{self.num_groups} groups x {self.delays_per_group} delays {self.delay_lengths.tolist()}"

    @property
    def total_delays(self):
        return self.num_groups * self.delays_per_group

    @property
    def group_index(self):
        """Group label of every delay line"""
        return np.repeat(np.arange(self.num_groups), self.delays_per_group)

    def group_slice(self, k):
        if not 0 <= k < self.num_groups:
            raise ValidationError(f'Group {k} is out of range for {self.num_groups} groups')
        return slice(k * self.delays_per_group, (k + 1) * self.delays_per_group)

    def group_delays(self, k):
        return self.delay_lengths[self.group_slice(k)]

    def clean(self):
        if self.num_groups < 1 or self.delays_per_group < 1:
            raise ValidationError(
                f'Group count and delays per group must be positive, got {self.num_groups} and {self.delays_per_group}'
            )
        if self.delay_lengths.size != self.total_delays:
            raise ValidationError(
                f'Expected {self.total_delays} delay lengths, got {self.delay_lengths.size}'
            )
        if np.any(self.delay_lengths < 1):
            raise ValidationError('All delay lengths must be at least one sample')

        gcd = np.gcd.outer(self.delay_lengths, self.delay_lengths)
        np.fill_diagonal(gcd, 1)
        if np.any(gcd != 1):
            i, j = np.argwhere(gcd != 1)[0]
            raise ValidationError(
                f'Delay lengths {self.delay_lengths[i]} and {self.delay_lengths[j]} are not coprime'
            )


@dataclass(frozen=True)
class FeedbackMatrix:
    """Assembled feedback matrix with its group mixing blocks and coupling"""

    BLOCK_DIAGONAL: ClassVar[str] = 'block_diagonal'
    COUPLED: ClassVar[str] = 'coupled'
    KIND_CHOICES: ClassVar[tuple] = (BLOCK_DIAGONAL, COUPLED)

    kind: str
    mixing_blocks: tuple
    coupling: np.ndarray
    matrix: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'mixing_blocks', tuple(np.asarray(m, dtype=float) for m in self.mixing_blocks))
        object.__setattr__(self, 'coupling', np.asarray(self.coupling, dtype=float))
        object.__setattr__(self, 'matrix', np.asarray(self.matrix, dtype=float))
        self.clean()

    @property
    def num_groups(self):
        return len(self.mixing_blocks)

    @property
    def block_size(self):
        return self.mixing_blocks[0].shape[0]

    def block(self, j, k):
        n = self.block_size
        return self.matrix[j * n:(j + 1) * n, k * n:(k + 1) * n]

    def clean(self):
        if self.kind not in self.KIND_CHOICES:
            raise ValidationError(f'Unknown feedback kind {self.kind!r}')
        if not self.mixing_blocks:
            raise ValidationError('At least one mixing block is required')

        for k, block in enumerate(self.mixing_blocks):
            if block.ndim != 2 or block.shape[0] != block.shape[1] or block.shape != self.mixing_blocks[0].shape:
                raise ValidationError(f'Mixing block {k} has inconsistent shape {block.shape}')
            error = _orthogonality_error(block)
            if error > ORTHOGONALITY_TOL:
                raise ValidationError(f'Mixing block {k} is not orthogonal (error {error:.3e})')

        g = self.num_groups
        if self.coupling.shape != (g, g):
            raise ValidationError(f'Coupling matrix must be {g}x{g}, got {self.coupling.shape}')
        error = _orthogonality_error(self.coupling)
        if error > ORTHOGONALITY_TOL:
            raise ValidationError(f'Coupling matrix is not orthogonal (error {error:.3e})')

        n = g * self.block_size
        if self.matrix.shape != (n, n):
            raise ValidationError(f'Assembled matrix must be {n}x{n}, got {self.matrix.shape}')
        error = _orthogonality_error(self.matrix)
        if error > ASSEMBLED_ORTHOGONALITY_TOL:
            raise ValidationError(f'Assembled feedback matrix is not orthogonal (error {error:.3e})')

        if self.kind == self.BLOCK_DIAGONAL:
            if not np.array_equal(self.coupling, np.eye(g)):
                raise ValidationError('Block-diagonal feedback requires identity coupling')
            for j in range(g):
                for k in range(g):
                    if j != k and np.any(self.block(j, k) != 0.0):
                        raise ValidationError(f'Off-diagonal block ({j}, {k}) of a block-diagonal matrix is nonzero')


@dataclass(frozen=True)
class GFDNParams:
    """All parameters of one (sub)band network

    ``absorption_gains`` holds one per-sample gain per group; the loop applies
    ``gamma_k ** m_i`` once per traversal of delay line i in group k.
    """

    topology: GroupTopology
    feedback: FeedbackMatrix
    input_gains: np.ndarray
    output_gains: np.ndarray
    absorption_gains: np.ndarray
    source_gains: np.ndarray = None
    receiver_gains: np.ndarray = None
    direct_gain: float = 0.0

    def __post_init__(self):
        g = self.topology.num_groups
        object.__setattr__(self, 'input_gains', np.asarray(self.input_gains, dtype=float).ravel())
        object.__setattr__(self, 'output_gains', np.asarray(self.output_gains, dtype=float).ravel())
        object.__setattr__(self, 'absorption_gains', np.asarray(self.absorption_gains, dtype=float).ravel())
        for name in ('source_gains', 'receiver_gains'):
            value = getattr(self, name)
            value = np.ones(g) if value is None else np.asarray(value, dtype=float).ravel()
            object.__setattr__(self, name, value)
        object.__setattr__(self, 'direct_gain', float(self.direct_gain))
        self.clean()

    def clean(self):
        n = self.topology.total_delays
        g = self.topology.num_groups
        if self.feedback.matrix.shape != (n, n) or self.feedback.num_groups != g:
            raise ValidationError(
                f'Feedback matrix {self.feedback.matrix.shape} does not match topology ({g} groups, {n} delays)'
            )
        for name in ('input_gains', 'output_gains'):
            if getattr(self, name).size != n:
                raise ValidationError(f'{name} must have {n} entries, got {getattr(self, name).size}')
        for name in ('absorption_gains', 'source_gains', 'receiver_gains'):
            if getattr(self, name).size != g:
                raise ValidationError(f'{name} must have {g} entries, got {getattr(self, name).size}')
        if np.any(self.absorption_gains <= 0.0) or np.any(self.absorption_gains > 1.0):
            raise ValidationError(f'Absorption gains must lie in (0, 1], got {self.absorption_gains.tolist()}')
        values = np.concatenate([self.input_gains, self.output_gains, self.source_gains, self.receiver_gains])
        if not np.all(np.isfinite(values)) or not np.isfinite(self.direct_gain):
            raise ValidationError('Network gains must be finite')

    @property
    def delay_attenuation(self):
        """Lumped gain applied once per traversal of each delay line"""
        topology = self.topology
        return self.absorption_gains[topology.group_index] ** topology.delay_lengths

    @property
    def effective_input_gains(self):
        return self.input_gains * self.source_gains[self.topology.group_index]

    @property
    def effective_output_gains(self):
        return self.output_gains * self.receiver_gains[self.topology.group_index]

    @property
    def is_lossless(self):
        return bool(np.all(self.absorption_gains == 1.0))

    def lossless(self):
        return replace(self, absorption_gains=np.ones(self.topology.num_groups))

    def with_position_gains(self, source_gains, receiver_gains):
        return replace(self, source_gains=source_gains, receiver_gains=receiver_gains)

    def group(self, k):
        """Single-group network formed by group k of a block-diagonal network"""
        if self.feedback.kind != FeedbackMatrix.BLOCK_DIAGONAL:
            raise ValidationError('Groups can only be separated when the feedback matrix is block-diagonal')
        topology = self.topology
        sl = topology.group_slice(k)
        block = self.feedback.block(k, k)
        feedback = FeedbackMatrix(
            kind=FeedbackMatrix.BLOCK_DIAGONAL,
            mixing_blocks=(self.feedback.mixing_blocks[k],),
            coupling=np.eye(1),
            matrix=block,
        )
        return GFDNParams(
            topology=GroupTopology(1, topology.delays_per_group, topology.delay_lengths[sl]),
            feedback=feedback,
            input_gains=self.input_gains[sl],
            output_gains=self.output_gains[sl],
            absorption_gains=self.absorption_gains[k:k + 1],
            source_gains=self.source_gains[k:k + 1],
            receiver_gains=self.receiver_gains[k:k + 1],
            direct_gain=0.0,
        )


@dataclass(frozen=True)
class SubbandNetworkBank:
    """One frequency-independent network per octave band, sharing delay lengths"""

    center_freqs: np.ndarray
    networks: tuple
    sample_rate: float
    t60_table: np.ndarray = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'center_freqs', np.asarray(self.center_freqs, dtype=float).ravel())
        object.__setattr__(self, 'networks', tuple(self.networks))
        if self.t60_table is not None:
            object.__setattr__(self, 't60_table', np.asarray(self.t60_table, dtype=float))
        self.clean()

    @property
    def num_bands(self):
        return len(self.networks)

    @property
    def topology(self):
        return self.networks[0].topology

    def clean(self):
        if self.sample_rate <= 0:
            raise ValidationError(f'Sample rate must be positive, got {self.sample_rate}')
        if not self.networks:
            raise ValidationError('A subband bank needs at least one network')
        if self.center_freqs.size != len(self.networks):
            raise ValidationError(
                f'{len(self.networks)} networks but {self.center_freqs.size} band centre frequencies'
            )
        delays = self.networks[0].topology.delay_lengths
        for b, network in enumerate(self.networks):
            if not np.array_equal(network.topology.delay_lengths, delays):
                raise ValidationError(f'Network for band {b} uses different delay lengths')

        if self.t60_table is not None:
            from .services import GFDNService

            g = self.topology.num_groups
            if self.t60_table.shape != (g, self.num_bands):
                raise ValidationError(
                    f'T60 table must have shape ({g}, {self.num_bands}), got {self.t60_table.shape}'
                )
            for b, network in enumerate(self.networks):
                expected = GFDNService.t60_to_absorption_gain(self.t60_table[:, b], 1, self.sample_rate)
                if not np.allclose(network.absorption_gains, expected, rtol=1e-12, atol=0.0):
                    raise ValidationError(f'Absorption gains of band {b} do not match the decay times')
