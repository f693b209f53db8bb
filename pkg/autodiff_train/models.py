import logging
from dataclasses import dataclass, field, fields

import numpy as np
import pandas as pd
from django.conf import settings
from django.core.exceptions import ValidationError

from gfdn_core.models import GroupTopology, SubbandNetworkBank
from gfdn_core.services import GFDNService

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class FourierEncoder:
    """Sinusoidal encoding of 3-D positions over a geometric ladder of spatial frequencies (1/m)"""

    f_min: float = 1.0
    f_max: float = 32.0
    num_freqs: int = 20

    def __post_init__(self):
        self.clean()

    def clean(self):
        if self.num_freqs < 2:
            raise ValidationError(f'The encoder needs at least two frequencies, got {self.num_freqs}')
        if not 0 < self.f_min <= self.f_max:
            raise ValidationError(f'Need 0 < f_min <= f_max, got {self.f_min} and {self.f_max}')

    @property
    def frequencies(self):
        n = np.arange(self.num_freqs)
        ladder = self.f_min * (self.f_max / self.f_min) ** (n / (self.num_freqs - 1))
        ladder[0], ladder[-1] = self.f_min, self.f_max
        return ladder

    @property
    def output_dim(self):
        return 6 * self.num_freqs


@dataclass(frozen=True)
class PerBandMLP:
    """
    Position-to-gain network of one band: ``hidden_layers`` blocks of
    affine -> layer norm (learnable gain and bias) -> ReLU, then an affine
    head with ``output_dim`` outputs. Weights map row vectors, shape (in, out).
    """

    input_dim: int
    hidden_layers: int
    width: int
    output_dim: int
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        self.clean()

    def clean(self):
        if self.input_dim < 1 or self.output_dim < 1 or self.hidden_layers < 0:
            raise ValidationError('MLP dimensions must be positive')
        if self.hidden_layers and self.width < 1:
            raise ValidationError(f'Hidden width must be positive, got {self.width}')
        expected = self.parameter_shapes()
        if set(self.parameters) != set(expected):
            raise ValidationError(f'MLP parameters {sorted(self.parameters)} do not match {sorted(expected)}')
        for name, shape in expected.items():
            if np.shape(self.parameters[name]) != shape:
                raise ValidationError(f'Parameter {name} has shape {np.shape(self.parameters[name])}, expected {shape}')

    def parameter_shapes(self):
        shapes = {}
        fan_in = self.input_dim
        for layer in range(self.hidden_layers):
            shapes[f'hidden.{layer}.weight'] = (fan_in, self.width)
            shapes[f'hidden.{layer}.bias'] = (self.width,)
            shapes[f'hidden.{layer}.norm_gain'] = (self.width,)
            shapes[f'hidden.{layer}.norm_bias'] = (self.width,)
            fan_in = self.width
        shapes['output.weight'] = (fan_in, self.output_dim)
        shapes['output.bias'] = (self.output_dim,)
        return shapes

    @classmethod
    def initialize(cls, input_dim, hidden_layers, width, output_dim, rng):
        """He-normal weights, zero biases, unit layer-norm gains"""
        params = {}
        fan_in = input_dim
        for layer in range(hidden_layers):
            params[f'hidden.{layer}.weight'] = rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in)
            params[f'hidden.{layer}.bias'] = np.zeros(width)
            params[f'hidden.{layer}.norm_gain'] = np.ones(width)
            params[f'hidden.{layer}.norm_bias'] = np.zeros(width)
            fan_in = width
        params['output.weight'] = rng.standard_normal((fan_in, output_dim)) * np.sqrt(2.0 / fan_in)
        params['output.bias'] = np.zeros(output_dim)
        return cls(input_dim, hidden_layers, width, output_dim, params)

    @staticmethod
    def schedule_for(center_hz, schedule):
        """(hidden layers, width) of the first schedule row whose band limit covers center_hz"""
        for limit, layers, width in schedule:
            if center_hz <= float(limit):
                return int(layers), int(width)
        raise ValidationError(f'No MLP schedule entry covers a band centred at {center_hz} Hz')

    def with_parameters(self, parameters):
        return PerBandMLP(self.input_dim, self.hidden_layers, self.width, self.output_dim,
                          {name: np.array(parameters[name], dtype=float) for name in self.parameter_shapes()})


@dataclass(frozen=True)
class LossWeights:
    edc: float = 10.0
    edr: float = 1.0
    spectral: float = 1.0
    sparsity: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) >= 0:
                raise ValidationError(f'Loss weight {f.name} must be non-negative, got {getattr(self, f.name)}')

    @classmethod
    def from_dict(cls, values):
        return cls(**{k: float(v) for k, v in values.items()})

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class TrainingConfig:
    """Hyper-parameters of one subband training run"""

    num_groups: int
    delays_per_group: int
    delay_range_s: tuple
    num_bands: int
    band_base_hz: float
    fir_order: int
    encoder: FourierEncoder
    mlp_schedule: tuple
    learn_source_gains: bool
    loss_weights: LossWeights
    edc_mask_prob: float
    learning_rate: float
    betas: tuple
    adam_eps: float
    epochs: int
    batch_size: int
    seed: int
    stft_window_ms: float
    stft_overlap: float
    delay_lengths: tuple = None

    def __post_init__(self):
        self.clean()

    def clean(self):
        if self.epochs < 0:
            raise ValidationError(f'Epoch count must be non-negative, got {self.epochs}')
        if self.batch_size < 1:
            raise ValidationError(f'Batch size must be positive, got {self.batch_size}')
        if not 0.0 < self.edc_mask_prob <= 1.0:
            raise ValidationError(f'EDC mask probability must lie in (0, 1], got {self.edc_mask_prob}')
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValidationError('Learning rate and Adam epsilon must be positive')
        if not all(0.0 <= beta < 1.0 for beta in self.betas):
            raise ValidationError(f'Adam betas must lie in [0, 1), got {self.betas}')
        if not 0.0 <= self.stft_overlap < 1.0:
            raise ValidationError(f'STFT overlap must lie in [0, 1), got {self.stft_overlap}')
        if self.delay_lengths is not None and len(self.delay_lengths) != self.num_groups * self.delays_per_group:
            raise ValidationError(
                f'{len(self.delay_lengths)} delay lengths for {self.num_groups} x {self.delays_per_group} lines'
            )

    @classmethod
    def from_settings(cls, **overrides):
        values = dict(settings.GFDN)
        values.update(overrides)
        return cls(
            num_groups=int(values['num_groups']),
            delays_per_group=int(values['delays_per_group']),
            delay_range_s=tuple(values['delay_range_s']),
            num_bands=int(values['num_bands']),
            band_base_hz=float(values['band_base_hz']),
            fir_order=int(values['fir_order']),
            encoder=FourierEncoder(
                float(values['encoder_f_min']), float(values['encoder_f_max']), int(values['encoder_num_freqs'])
            ),
            mlp_schedule=tuple(tuple(row) for row in values['mlp_schedule']),
            learn_source_gains=bool(values['learn_source_gains']),
            loss_weights=LossWeights.from_dict(values['loss_weights']),
            edc_mask_prob=float(values['edc_mask_prob']),
            learning_rate=float(values['learning_rate']),
            betas=tuple(values['betas']),
            adam_eps=float(values['adam_eps']),
            epochs=int(values['epochs']),
            batch_size=int(values['batch_size']),
            seed=int(values['seed']),
            stft_window_ms=float(values['stft_window_ms']),
            stft_overlap=float(values['stft_overlap']),
            delay_lengths=None if values.get('delay_lengths') is None else tuple(values['delay_lengths']),
        )


@dataclass(frozen=True)
class BandModel:
    """Trainable state of one band: skew generators W, unit-position gains b and c, and the gain MLP"""

    center_hz: float
    generators: np.ndarray
    input_gains: np.ndarray
    output_gains: np.ndarray
    mlp: PerBandMLP

    def __post_init__(self):
        g, n, m = np.shape(self.generators)
        if n != m or np.shape(self.input_gains) != (g, n) or np.shape(self.output_gains) != (g, n):
            raise ValidationError('Generators must be (G, N\', N\') and gains (G, N\')')

    @property
    def mixing_blocks(self):
        return [GFDNService.build_orthogonal_from_skew(w) for w in self.generators]

    def to_params(self, topology, absorption_gains):
        """Network with unit position gains"""
        feedback = GFDNService.assemble_feedback(np.eye(topology.num_groups), self.mixing_blocks)
        return GFDNService.make_params(
            topology, feedback,
            input_gains=np.ravel(self.input_gains),
            output_gains=np.ravel(self.output_gains),
            absorption_gains=absorption_gains,
        )


@dataclass
class TrainingResult:
    """Trained subband model with its initialization and loss history"""

    config: TrainingConfig
    sample_rate: float
    topology: GroupTopology
    t60_table: np.ndarray
    center_freqs: np.ndarray
    num_points: int
    bands: list
    initial_bands: list
    source_position: np.ndarray
    history: pd.DataFrame = field(default_factory=pd.DataFrame)

    def absorption_gains(self, band):
        return GFDNService.t60_to_absorption_gain(self.t60_table[:, band], 1, self.sample_rate)

    def band_params(self, band, initial=False):
        model = (self.initial_bands if initial else self.bands)[band]
        return model.to_params(self.topology, np.atleast_1d(self.absorption_gains(band)))

    def network_bank(self, initial=False):
        return SubbandNetworkBank(
            center_freqs=self.center_freqs,
            networks=[self.band_params(b, initial) for b in range(len(self.bands))],
            sample_rate=self.sample_rate,
            t60_table=self.t60_table,
        )
