import numpy as np
import pytest

from common_slopes.models import DecayModel
from filterbank.services import FilterBankService


@pytest.fixture
def make_model():
    """Factory for single-position decay models at 8 kHz"""

    def _make(t60s, amplitudes, fs=8000, band_centers=(1000.0,)):
        t60_table = np.reshape(np.asarray(t60s, dtype=float), (len(t60s), -1))
        amplitudes = np.reshape(np.asarray(amplitudes, dtype=float), t60_table.shape)
        return DecayModel(
            t60_table=t60_table,
            band_centers=band_centers,
            sample_rate=fs,
            positions=[[1.0, 1.0, 1.5]],
            amplitudes=amplitudes[None],
        )

    return _make


@pytest.fixture
def broadband_bank():
    """Single-band bank whose only filter is a one-sample delay"""
    return FilterBankService.design_bank(8000, 1, fir_order=2, base_hz=1000.0)
