import numpy as np
import pytest

from filterbank.services import FilterBankService
from gfdn_core.services import GFDNService


@pytest.fixture
def decaying_noise():
    """One second of Gaussian noise at 8 kHz decaying with T60 = 0.3 s"""
    fs = 8000
    n = np.arange(fs)
    envelope = np.exp(-6.91 * n / (0.3 * fs))
    return np.random.default_rng(11).standard_normal(fs) * envelope, fs


@pytest.fixture
def delta_bank():
    """Single-band bank whose only filter is a one-sample delay"""
    return FilterBankService.design_bank(8000, 1, fir_order=2, base_hz=125.0)


@pytest.fixture
def small_bank():
    return FilterBankService.design_bank(8000, 4, fir_order=256, base_hz=125.0)


@pytest.fixture
def short_delay_network():
    """Factory for single-group networks with short coprime delays at 8 kHz"""

    def _make(delays_per_group=4, seed=0, t60=0.15, delay_range_s=(0.005, 0.015)):
        rng = np.random.default_rng(seed)
        delays = GFDNService.default_delay_lengths(delays_per_group, 8000, seed=seed, delay_range_s=delay_range_s)
        return GFDNService.random_network(1, delays_per_group, 8000, t60, rng, delay_lengths=delays)

    return _make
