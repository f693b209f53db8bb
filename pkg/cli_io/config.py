"""
Run configuration: the ``GFDN`` settings defaults merged with an optional
JSON or TOML run file.
"""
import hashlib
import json
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from django.conf import settings
from django.core.exceptions import ValidationError

from autodiff_train.models import FourierEncoder, LossWeights, PerBandMLP, TrainingConfig
from filterbank.services import FilterBankService
from gfdn_core.models import GroupTopology

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    """Every setting of one reproducible run"""

    sample_rate: float
    num_groups: int
    delays_per_group: int
    delay_range_s: tuple
    direct_gain: float
    band_base_hz: float
    num_bands: int
    fir_order: int
    encoder_f_min: float
    encoder_f_max: float
    encoder_num_freqs: int
    mlp_schedule: tuple
    learn_source_gains: bool
    loss_weights: dict
    edc_mask_prob: float
    learning_rate: float
    betas: tuple
    adam_eps: float
    epochs: int
    batch_size: int
    seed: int
    split_fraction: float
    stft_window_ms: float
    stft_overlap: float
    ned_window_ms: float
    ned_hop_ms: float
    delay_lengths: tuple = None

    def __post_init__(self):
        # canonical scalar types keep the hash independent of 32000 vs 32000.0
        for f in fields(self):
            if f.type in (int, float, bool):
                object.__setattr__(self, f.name, f.type(getattr(self, f.name)))
        object.__setattr__(self, 'delay_range_s', tuple(self.delay_range_s))
        object.__setattr__(self, 'mlp_schedule', tuple(tuple(row) for row in self.mlp_schedule))
        object.__setattr__(self, 'betas', tuple(self.betas))
        object.__setattr__(self, 'loss_weights', dict(self.loss_weights))
        if self.delay_lengths is not None:
            object.__setattr__(self, 'delay_lengths', tuple(int(m) for m in self.delay_lengths))

    @classmethod
    def load(cls, path=None, **overrides):
        """Settings defaults, then the run file at ``path``, then ``overrides``"""
        values = dict(settings.GFDN)
        values.setdefault('delay_lengths', None)
        if path:
            values.update(cls.read_file(path))
        values.update({k: v for k, v in overrides.items() if v is not None})

        names = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - names)
        if unknown:
            raise ValidationError([f'Unknown configuration key {key!r}' for key in unknown])
        try:
            config = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f'Malformed configuration: {exc}')
        config.clean()
        return config

    @staticmethod
    def read_file(path):
        path = Path(path)
        if not path.is_file():
            raise ValidationError(f'Configuration file {path} does not exist')
        try:
            if path.suffix == '.toml':
                with open(path, 'rb') as f:
                    return tomllib.load(f)
            if path.suffix == '.json':
                return json.loads(path.read_text(encoding='utf-8'))
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise ValidationError(f'Configuration file {path} is malformed: {exc}')
        raise ValidationError(f'Configuration file {path} must be .json or .toml')

    def clean(self):
        """Check every module precondition and report all problems at once"""
        errors = []
        checks = (
            self._check_sampling,
            self._check_topology,
            self._check_filter_bank,
            self._check_mlp_schedule,
            self.training_config,
        )
        for check in checks:
            try:
                check()
            except ValidationError as exc:
                errors.extend(exc.messages)
            except (TypeError, ValueError) as exc:
                errors.append(f'{check.__name__.strip("_")}: {exc}')
        if errors:
            raise ValidationError(errors)

    def _check_sampling(self):
        errors = []
        if not self.sample_rate > 0:
            errors.append(f'Sample rate must be positive, got {self.sample_rate}')
        if not 0.0 < self.split_fraction <= 1.0:
            errors.append(f'Split fraction must lie in (0, 1], got {self.split_fraction}')
        if self.ned_window_ms < 10.0 or self.ned_hop_ms <= 0:
            errors.append(f'NED needs a window of at least 10 ms and a positive hop, got '
                          f'{self.ned_window_ms} / {self.ned_hop_ms} ms')
        if self.stft_window_ms <= 0:
            errors.append(f'STFT window must be positive, got {self.stft_window_ms} ms')
        if errors:
            raise ValidationError(errors)

    def _check_topology(self):
        if self.num_groups < 1 or self.delays_per_group < 1:
            raise ValidationError(f'Need at least one group of one delay line, got '
                                  f'{self.num_groups} x {self.delays_per_group}')
        lo, hi = self.delay_range_s
        if not 0 < lo < hi:
            raise ValidationError(f'Delay range must satisfy 0 < low < high, got {self.delay_range_s}')
        total = self.num_groups * self.delays_per_group
        if self.delay_lengths is not None:
            GroupTopology(self.num_groups, self.delays_per_group, self.delay_lengths)
        elif np.floor(hi * self.sample_rate) - np.floor(lo * self.sample_rate) < total:
            raise ValidationError(f'Delay range {self.delay_range_s} s is too narrow for {total} distinct delays')

    def _check_filter_bank(self):
        if self.num_bands < 1:
            raise ValidationError(f'Number of bands must be positive, got {self.num_bands}')
        if self.fir_order < 2 or self.fir_order % 2:
            raise ValidationError(f'Filter order must be even and at least 2, got {self.fir_order}')
        top = FilterBankService.octave_centers(self.num_bands, self.band_base_hz)[-1]
        if self.sample_rate <= 2.0 * np.sqrt(2.0) * top:
            raise ValidationError(f'Top band centred at {top:g} Hz does not fit below Nyquist at {self.sample_rate:g} Hz')

    def _check_mlp_schedule(self):
        if any(len(row) != 3 for row in self.mlp_schedule):
            raise ValidationError('MLP schedule rows must be (band limit Hz, hidden layers, width)')
        for center in self.band_centers:
            PerBandMLP.schedule_for(center, self.mlp_schedule)

    @property
    def band_centers(self):
        return FilterBankService.octave_centers(self.num_bands, self.band_base_hz)

    def training_config(self, **overrides):
        values = {
            'num_groups': self.num_groups,
            'delays_per_group': self.delays_per_group,
            'delay_range_s': self.delay_range_s,
            'num_bands': self.num_bands,
            'band_base_hz': self.band_base_hz,
            'fir_order': self.fir_order,
            'encoder': FourierEncoder(self.encoder_f_min, self.encoder_f_max, self.encoder_num_freqs),
            'mlp_schedule': self.mlp_schedule,
            'learn_source_gains': self.learn_source_gains,
            'loss_weights': LossWeights.from_dict(self.loss_weights),
            'edc_mask_prob': self.edc_mask_prob,
            'learning_rate': self.learning_rate,
            'betas': self.betas,
            'adam_eps': self.adam_eps,
            'epochs': self.epochs,
            'batch_size': self.batch_size,
            'seed': self.seed,
            'stft_window_ms': self.stft_window_ms,
            'stft_overlap': self.stft_overlap,
            'delay_lengths': self.delay_lengths,
        }
        values.update(overrides)
        return TrainingConfig(**values)

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        """SHA-256 of the canonical JSON form"""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        document = {'config_hash': self.config_hash(), 'config': self.to_dict()}
        path.write_text(json.dumps(document, indent=2, sort_keys=True), encoding='utf-8')
        return path
