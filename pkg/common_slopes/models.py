import hashlib
import json
import logging
import operator
from dataclasses import asdict, dataclass, fields

import numpy as np
from django.core.exceptions import ValidationError
from scipy.special import expit

logger = logging.getLogger(__name__)

# ln(10 ** 6): 60 dB of energy decay in nepers
ENERGY_DECAY_CONSTANT = 13.8
POSITION_TOL = 1e-9


def _as_positions(values):
    return np.atleast_2d(np.asarray(values, dtype=float))


@dataclass(frozen=True)
class DecayModel:
    """
    Common decay times shared by all positions, and non-negative slope
    amplitudes per position, slope and band.
    """

    t60_table: np.ndarray
    band_centers: np.ndarray
    sample_rate: float
    positions: np.ndarray
    amplitudes: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 't60_table', np.atleast_2d(np.asarray(self.t60_table, dtype=float)))
        object.__setattr__(self, 'band_centers', np.asarray(self.band_centers, dtype=float).ravel())
        object.__setattr__(self, 'positions', _as_positions(self.positions))
        object.__setattr__(self, 'amplitudes', np.asarray(self.amplitudes, dtype=float))
        object.__setattr__(self, 'sample_rate', float(self.sample_rate))
        self.clean()

    def __str__(self):
        return f"{self.num_slopes}-slope model over {self.num_bands} bands at {self.num_positions} positions"

    @property
    def num_slopes(self):
        return self.t60_table.shape[0]

    @property
    def num_bands(self):
        return self.t60_table.shape[1]

    @property
    def num_positions(self):
        return self.positions.shape[0]

    def clean(self):
        if self.sample_rate <= 0:
            raise ValidationError(f'Sample rate must be positive, got {self.sample_rate}')
        if np.any(self.t60_table <= 0) or not np.all(np.isfinite(self.t60_table)):
            raise ValidationError(f'Decay times must be positive and finite, got {self.t60_table.tolist()}')
        if self.band_centers.size != self.num_bands:
            raise ValidationError(f'{self.band_centers.size} band centres for {self.num_bands} bands')
        if self.positions.shape[1:] != (3,):
            raise ValidationError(f'Positions must be (P, 3), got {self.positions.shape}')
        expected = (self.num_positions, self.num_slopes, self.num_bands)
        if self.amplitudes.shape != expected:
            raise ValidationError(f'Amplitudes must have shape {expected}, got {self.amplitudes.shape}')
        if np.any(self.amplitudes < 0) or not np.all(np.isfinite(self.amplitudes)):
            raise ValidationError('Amplitudes must be non-negative and finite')

    def kernel(self, n):
        """exp(-13.8 n / (T60 fs)) for every slope and band, shape (G, B, len(n))"""
        n = np.asarray(n, dtype=float)
        rates = ENERGY_DECAY_CONSTANT / (self.t60_table * self.sample_rate)
        return np.exp(-rates[..., None] * n)

    def position_index(self, x):
        x = np.asarray(x, dtype=float).ravel()
        matches = np.flatnonzero(np.all(np.abs(self.positions - x) <= POSITION_TOL, axis=1))
        if not matches.size:
            raise ValidationError(f'Position {x.tolist()} is not in the model')
        return int(matches[0])

    def amplitudes_at(self, x):
        return self.amplitudes[self.position_index(x)]

    def to_dict(self):
        return {
            't60_table': self.t60_table.tolist(),
            'band_centers': self.band_centers.tolist(),
            'sample_rate': self.sample_rate,
            'positions': self.positions.tolist(),
            'amplitudes': self.amplitudes.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(**{f.name: data[f.name] for f in fields(cls)})
        except KeyError as exc:
            raise ValidationError(f'Decay model is missing field {exc.args[0]!r}')


@dataclass(frozen=True)
class RoomSpec:
    """
    Two coupled volumes split at x = boundary_x. Slope amplitudes blend from
    ``near_amplitudes`` to ``far_amplitudes`` along x through a sigmoid of
    width ``transition_width`` metres; a width of zero gives a step.
    """

    t60_table: np.ndarray
    band_centers: np.ndarray
    sample_rate: float
    near_amplitudes: np.ndarray
    far_amplitudes: np.ndarray
    boundary_x: float = 0.5
    transition_width: float = 0.0
    source_position: tuple = (0.2, 0.2, 1.5)
    rir_length_s: float = 1.0

    def __post_init__(self):
        for name in ('t60_table', 'near_amplitudes', 'far_amplitudes'):
            object.__setattr__(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        object.__setattr__(self, 'band_centers', np.asarray(self.band_centers, dtype=float).ravel())
        object.__setattr__(self, 'source_position', tuple(float(v) for v in self.source_position))
        self.clean()

    def clean(self):
        shape = self.t60_table.shape
        if self.near_amplitudes.shape != shape or self.far_amplitudes.shape != shape:
            raise ValidationError(f'Amplitude tables must match the decay-time table {shape}')
        if np.any(self.near_amplitudes < 0) or np.any(self.far_amplitudes < 0):
            raise ValidationError('Amplitudes must be non-negative')
        if self.transition_width < 0:
            raise ValidationError(f'Transition width must be non-negative, got {self.transition_width}')
        if len(self.source_position) != 3:
            raise ValidationError(f'Source position must be 3-D, got {self.source_position}')
        if self.rir_length_s <= 0:
            raise ValidationError(f'RIR length must be positive, got {self.rir_length_s}')

    @property
    def num_samples(self):
        return int(round(self.rir_length_s * self.sample_rate))

    def blend(self, x):
        """Weight of the far volume at x coordinates ``x``"""
        x = np.asarray(x, dtype=float)
        if self.transition_width == 0:
            return (x >= self.boundary_x).astype(float)
        return expit((x - self.boundary_x) / self.transition_width)

    def amplitude_field(self, positions):
        """Amplitudes A_{k,b}(x) at every position, shape (P, G, B)"""
        w = self.blend(_as_positions(positions)[:, 0])[:, None, None]
        return (1.0 - w) * self.near_amplitudes + w * self.far_amplitudes


@dataclass(frozen=True)
class GridSpec:
    """Rectangular receiver grid at a fixed height, x-major ordering"""

    x_range: tuple
    y_range: tuple
    nx: int
    ny: int
    height: float = 1.5

    def __post_init__(self):
        self.clean()

    def clean(self):
        if self.nx < 1 or self.ny < 1:
            raise ValidationError(f'Grid needs at least one point per axis, got {self.nx} x {self.ny}')
        for name, (lo, hi), count in (('x', self.x_range, self.nx), ('y', self.y_range, self.ny)):
            if not (np.isfinite(lo) and np.isfinite(hi)) or hi < lo:
                raise ValidationError(f'Invalid {name} range ({lo}, {hi})')
            if count > 1 and hi == lo:
                raise ValidationError(f'{count} points on an empty {name} range would coincide')

    @property
    def num_points(self):
        return self.nx * self.ny

    @property
    def spacing(self):
        dx = (self.x_range[1] - self.x_range[0]) / max(self.nx - 1, 1)
        dy = (self.y_range[1] - self.y_range[0]) / max(self.ny - 1, 1)
        return dx, dy

    def positions(self):
        xs = np.linspace(self.x_range[0], self.x_range[1], self.nx)
        ys = np.linspace(self.y_range[0], self.y_range[1], self.ny)
        gx, gy = np.meshgrid(xs, ys, indexing='ij')
        return np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, float(self.height))], axis=1)


@dataclass(frozen=True)
class CostModelInput:
    """
    Sizes entering the operation and memory counts. All values are
    non-negative integers so every count is exact.
    """

    B: int = 8
    N: int = 12
    N_group: int = 4
    G: int = 3
    P: int = 0
    Q_ops: int = 0
    M_b: int = 313
    M: int = 2500
    A: int = 128
    N_layer: int = 3
    F: int = 1
    tau: int = 1120

    def __post_init__(self):
        self.clean()

    def clean(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                raise ValidationError(f'{f.name} must be an integer, got {value!r}')
            try:
                value = operator.index(value)
            except TypeError:
                raise ValidationError(f'{f.name} must be an integer, got {value!r}')
            if value < 0:
                raise ValidationError(f'{f.name} must be non-negative, got {value}')
            object.__setattr__(self, f.name, int(value))

    def config_hash(self):
        """SHA-256 of the canonical JSON form of the sizes"""
        canonical = json.dumps(asdict(self), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()
