import logging
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrequencyGrid:
    """
    Half-circle sampling grid of a length-Q inverse DFT.

    The grid holds Q/2 + 1 bins q = 0..Q/2 at omega_q = 2*pi*q/Q, DC and
    Nyquist included. These are the points of the upper half circle at
    spacing pi/(Q/2), not Q points at pi*q/Q; the lower half is the complex
    conjugate mirror and is completed when the response is inverted.
    ``start``/``stop`` select a contiguous bin range so a grid can be
    evaluated in pieces.
    """

    num_points: int
    sample_rate: float
    start: int = 0
    stop: int = None

    def __post_init__(self):
        if self.stop is None:
            object.__setattr__(self, 'stop', self.num_bins)
        self.clean()

    @property
    def num_bins(self):
        return self.num_points // 2 + 1

    def clean(self):
        q = self.num_points
        if q < 2 or q & (q - 1):
            raise ValidationError(f'Number of frequency points must be a power of two, got {q}')
        if self.sample_rate <= 0:
            raise ValidationError(f'Sample rate must be positive, got {self.sample_rate}')
        if not 0 <= self.start < self.stop <= self.num_bins:
            raise ValidationError(f'Bin range [{self.start}, {self.stop}) is outside [0, {self.num_bins})')

    @property
    def bins(self):
        return np.arange(self.start, self.stop)

    @property
    def angles(self):
        return 2.0 * np.pi * self.bins / self.num_points

    @property
    def frequencies_hz(self):
        return self.bins * self.sample_rate / self.num_points

    @property
    def is_complete(self):
        return self.start == 0 and self.stop == self.num_bins

    def __len__(self):
        return self.stop - self.start

    def partition(self, parts):
        """Split into at most ``parts`` disjoint contiguous grids covering this one"""
        parts = max(1, min(int(parts), len(self)))
        edges = np.linspace(self.start, self.stop, parts + 1).round().astype(int)
        return [
            FrequencyGrid(self.num_points, self.sample_rate, int(lo), int(hi))
            for lo, hi in zip(edges[:-1], edges[1:])
            if hi > lo
        ]


@dataclass(frozen=True)
class ComplexResponse:
    """Transfer function samples aligned to a FrequencyGrid"""

    grid: FrequencyGrid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'values', np.asarray(self.values, dtype=complex).ravel())
        self.clean()

    def clean(self):
        if self.values.size != len(self.grid):
            raise ValidationError(f'{self.values.size} response values for a grid of {len(self.grid)} bins')
        if not np.all(np.isfinite(self.values)):
            raise ValidationError('Response values must be finite')

    @classmethod
    def concatenate(cls, responses):
        responses = list(responses)
        first, last = responses[0].grid, responses[-1].grid
        for a, b in zip(responses[:-1], responses[1:]):
            if a.grid.stop != b.grid.start or a.grid.num_points != b.grid.num_points:
                raise ValidationError('Responses do not cover adjacent bin ranges')
        grid = FrequencyGrid(first.num_points, first.sample_rate, first.start, last.stop)
        return cls(grid=grid, values=np.concatenate([r.values for r in responses]))
