import numpy as np
import pytest

from gfdn_core.services import GFDNService


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_network():
    """Factory for small random networks at 8 kHz"""

    def _make(num_groups=2, delays_per_group=3, t60s=0.15, seed=0, fs=8000, coupling=None):
        rng = np.random.default_rng(seed)
        return GFDNService.random_network(
            num_groups, delays_per_group, fs, t60s, rng, coupling=coupling
        )

    return _make


@pytest.fixture
def two_group_network(make_network):
    return make_network(num_groups=2, delays_per_group=3, t60s=[0.14, 0.16], seed=7)
