import pytest

from filterbank.services import FilterBankService


@pytest.fixture(scope='session')
def eight_band_bank():
    """Eight octave bands from 63 Hz, order 4096 at 32 kHz"""
    return FilterBankService.design_bank(32000, 8, fir_order=4096, base_hz=63.0)


@pytest.fixture
def small_bank():
    return FilterBankService.design_bank(8000, 4, fir_order=256, base_hz=125.0)
