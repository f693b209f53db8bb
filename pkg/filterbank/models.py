import logging
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12


@dataclass(frozen=True)
class OctaveBank:
    """Linear-phase octave filters whose amplitude responses sum to a pure delay"""

    center_freqs: np.ndarray
    taps: np.ndarray
    sample_rate: float
    fir_order: int

    def __post_init__(self):
        object.__setattr__(self, 'center_freqs', np.asarray(self.center_freqs, dtype=float).ravel())
        object.__setattr__(self, 'taps', np.atleast_2d(np.asarray(self.taps, dtype=float)))
        self.clean()

    def __str__(self):
        return f"{self.num_bands}-band octave bank, order {self.fir_order} at {self.sample_rate:g} Hz"

    @property
    def num_bands(self):
        return self.taps.shape[0]

    @property
    def num_taps(self):
        return self.taps.shape[1]

    @property
    def group_delay(self):
        """Common delay of every band, in samples"""
        return self.fir_order // 2

    @property
    def band_edges(self):
        """Crossover-bounded (low, high) edges of every band in Hz"""
        crossovers = self.center_freqs[:-1] * np.sqrt(2.0)
        lows = np.concatenate([[0.0], crossovers])
        highs = np.concatenate([crossovers, [self.sample_rate / 2.0]])
        return np.stack([lows, highs], axis=1)

    def clean(self):
        if self.num_bands != self.center_freqs.size:
            raise ValidationError(f'{self.num_bands} filters for {self.center_freqs.size} centre frequencies')
        if self.fir_order < 2 or self.fir_order % 2:
            raise ValidationError(f'Filter order must be even and at least 2, got {self.fir_order}')
        if self.num_taps != self.fir_order + 1:
            raise ValidationError(f'Order {self.fir_order} needs {self.fir_order + 1} taps, got {self.num_taps}')
        asymmetry = np.max(np.abs(self.taps - self.taps[:, ::-1]))
        if asymmetry > SYMMETRY_TOL:
            raise ValidationError(f'Filters are not linear phase (asymmetry {asymmetry:.2e})')
