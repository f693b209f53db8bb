import numpy as np
import pytest

from gfdn_core.services import GFDNService


@pytest.fixture
def network():
    rng = np.random.default_rng(21)
    params = GFDNService.random_network(2, 3, 8000, [0.14, 0.15], rng)
    return GFDNService.update_position_gains(params, [0.8, 1.2], [1.5, 0.6])


@pytest.fixture
def single_delay():
    """One delay line with unit feedback and gains"""

    def _make(m=5, gamma=0.99):
        from gfdn_core.models import GroupTopology

        topology = GroupTopology(1, 1, [m])
        feedback = GFDNService.assemble_feedback(np.eye(1), [np.eye(1)])
        return GFDNService.make_params(topology, feedback, [1.0], [1.0], [gamma])

    return _make
