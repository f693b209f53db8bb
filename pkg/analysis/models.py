import logging
from dataclasses import dataclass, field

import numpy as np
from django.core.exceptions import ValidationError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EnergyDecay:
    """EDC, EDR and NED of one signal with their axes"""

    sample_rate: float
    edc_db: np.ndarray
    edr_db: np.ndarray = None
    edr_times: np.ndarray = None
    edr_freqs: np.ndarray = None
    ned: np.ndarray = None
    ned_times: np.ndarray = None

    def __post_init__(self):
        self.clean()

    def clean(self):
        if np.any(np.diff(self.edc_db) > 0):
            raise ValidationError('EDC must be non-increasing in time')
        if self.edr_db is not None and np.any(np.diff(self.edr_db, axis=1) > 0):
            raise ValidationError('EDR must be non-increasing along time in every bin')

    @property
    def edc_times(self):
        return np.arange(self.edc_db.size) / self.sample_rate


@dataclass(frozen=True)
class ModalDecomposition:
    """Poles and residues of a network in the 1 / (1 - lambda z^-1) form"""

    poles: np.ndarray
    residues: np.ndarray
    groups: np.ndarray
    defective: np.ndarray = None
    band: int = None

    def __post_init__(self):
        if self.defective is None:
            object.__setattr__(self, 'defective', np.zeros(self.poles.size, dtype=bool))
        self.clean()

    def clean(self):
        if not (self.poles.size == self.residues.size == self.groups.size == self.defective.size):
            raise ValidationError('Poles, residues, group labels and defect flags must align')

    def __len__(self):
        return self.poles.size

    @property
    def magnitudes(self):
        return np.abs(self.poles)

    @property
    def frequencies(self):
        """Pole angles in rad/sample"""
        return np.angle(self.poles)


@dataclass(frozen=True)
class OnePoleAbsorption:
    """
    First-order absorption filter g (1 - p) / (1 - p z^-1) of one delay line,
    fixing the decay time at DC and at Nyquist.
    """

    gain: float
    pole: float

    def __post_init__(self):
        if not 0.0 < self.gain <= 1.0:
            raise ValidationError(f'DC gain must lie in (0, 1], got {self.gain}')
        if not -1.0 < self.pole < 1.0:
            raise ValidationError(f'Pole must lie inside the unit circle, got {self.pole}')

    @classmethod
    def design(cls, t60_dc, t60_nyquist, delay_m, fs):
        from gfdn_core.services import GFDNService

        g_dc = GFDNService.t60_to_absorption_gain(t60_dc, delay_m, fs)
        g_ny = GFDNService.t60_to_absorption_gain(t60_nyquist, delay_m, fs)
        ratio = g_ny / g_dc
        return cls(gain=g_dc, pole=(1.0 - ratio) / (1.0 + ratio))

    @property
    def feedforward(self):
        return self.gain * (1.0 - self.pole)

    def magnitude(self, omega):
        omega = np.asarray(omega, dtype=float)
        return self.feedforward / np.abs(1.0 - self.pole * np.exp(-1j * omega))


@dataclass(frozen=True)
class PoleBoundReport:
    """Per-pole check of magnitudes against band-wise attenuation bounds"""

    magnitudes: np.ndarray
    bands: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    approximation: np.ndarray
    tolerance: float
    within: np.ndarray = field(init=False)

    def __post_init__(self):
        within = (self.magnitudes >= self.lower - self.tolerance) & (self.magnitudes <= self.upper + self.tolerance)
        object.__setattr__(self, 'within', within)
        if not np.all(within):
            logger.warning(f"{int(np.sum(~within))} of {within.size} poles fall outside their band bounds")

    @property
    def fraction_within(self):
        return float(np.mean(self.within)) if self.within.size else 1.0

    @property
    def violations(self):
        return np.flatnonzero(~self.within)

    @property
    def max_approximation_error(self):
        return float(np.max(np.abs(self.magnitudes - self.approximation))) if self.magnitudes.size else 0.0
