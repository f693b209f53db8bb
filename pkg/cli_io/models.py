import logging
from dataclasses import dataclass, field, replace

import numpy as np
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DatasetSplit:
    """Train/test partition of position indices"""

    train: np.ndarray
    test: np.ndarray
    fraction: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, 'train', np.asarray(self.train, dtype=np.int64).ravel())
        object.__setattr__(self, 'test', np.asarray(self.test, dtype=np.int64).ravel())
        object.__setattr__(self, 'fraction', float(self.fraction))
        object.__setattr__(self, 'seed', int(self.seed))

    def clean(self, num_positions):
        indices = np.concatenate([self.train, self.test])
        if indices.size != num_positions or not np.array_equal(np.sort(indices), np.arange(num_positions)):
            raise ValidationError(f'Split does not partition {num_positions} positions')
        if not 0.0 < self.fraction <= 1.0:
            raise ValidationError(f'Split fraction must lie in (0, 1], got {self.fraction}')
        if abs(self.train.size - self.fraction * num_positions) > 1.0:
            raise ValidationError(
                f'{self.train.size} training positions do not match fraction {self.fraction} of {num_positions}'
            )

    def to_dict(self):
        return {'train': self.train.tolist(), 'test': self.test.tolist(), 'fraction': self.fraction, 'seed': self.seed}


@dataclass(frozen=True)
class RIRDataset:
    """
    Mono room impulse responses from one source to a set of receivers, all at
    one sample rate. ``t60_table`` holds the common decay times (groups x
    bands) the networks are built from; ``ground_truth`` carries the decay
    model of synthetic datasets.
    """

    sample_rate: float
    source_position: np.ndarray
    receiver_positions: np.ndarray
    rirs: np.ndarray
    t60_table: np.ndarray = None
    band_centers: np.ndarray = None
    split: DatasetSplit = None
    ground_truth: object = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'sample_rate', float(self.sample_rate))
        object.__setattr__(self, 'source_position', np.asarray(self.source_position, dtype=float).ravel())
        object.__setattr__(self, 'receiver_positions', np.atleast_2d(np.asarray(self.receiver_positions, dtype=float)))
        object.__setattr__(self, 'rirs', np.asarray(self.rirs, dtype=float))
        if self.t60_table is not None:
            object.__setattr__(self, 't60_table', np.atleast_2d(np.asarray(self.t60_table, dtype=float)))
        if self.band_centers is not None:
            object.__setattr__(self, 'band_centers', np.asarray(self.band_centers, dtype=float).ravel())
        self.clean()

    def __str__(self):
        return f"{self.num_positions} RIRs of {self.num_samples} samples at {self.sample_rate:g} Hz"

    @property
    def num_positions(self):
        return self.rirs.shape[0]

    @property
    def num_samples(self):
        return self.rirs.shape[1]

    def clean(self):
        if self.sample_rate <= 0:
            raise ValidationError(f'Sample rate must be positive, got {self.sample_rate}')
        if self.source_position.size != 3:
            raise ValidationError(f'Source position must be 3-D, got {self.source_position.tolist()}')
        if self.receiver_positions.size == 0:
            raise ValidationError('The dataset has no receivers')
        if self.receiver_positions.shape[1] != 3:
            raise ValidationError(f'Receiver positions must be (P, 3), got {self.receiver_positions.shape}')
        if self.rirs.ndim != 2 or self.rirs.shape[0] != self.receiver_positions.shape[0]:
            raise ValidationError(
                f'Expected one mono RIR per receiver, got {self.rirs.shape} for '
                f'{self.receiver_positions.shape[0]} receivers'
            )
        if self.rirs.shape[1] == 0 or not np.all(np.isfinite(self.rirs)):
            raise ValidationError('RIRs must be non-empty and finite')
        if self.t60_table is not None:
            if np.any(self.t60_table <= 0):
                raise ValidationError('Decay times must be positive')
            if self.band_centers is not None and self.band_centers.size != self.t60_table.shape[1]:
                raise ValidationError(
                    f'{self.band_centers.size} band centres for a table with {self.t60_table.shape[1]} bands'
                )
        if self.split is not None:
            self.split.clean(self.num_positions)

    def subset(self, indices):
        """Dataset restricted to ``indices``; the split is dropped"""
        indices = np.asarray(indices, dtype=np.int64)
        return replace(self, receiver_positions=self.receiver_positions[indices], rirs=self.rirs[indices],
                       split=None, ground_truth=None)

    def train_set(self):
        if self.split is None:
            raise ValidationError('The dataset has no train/test split')
        return self.subset(self.split.train)

    def test_set(self):
        if self.split is None:
            raise ValidationError('The dataset has no train/test split')
        return self.subset(self.split.test)
