import json

import numpy as np
import pytest

from cli_io.models import RIRDataset

TINY_RUN = {
    'sample_rate': 8000,
    'num_groups': 2,
    'delays_per_group': 2,
    'delay_range_s': [0.0005, 0.002],
    'delay_lengths': [3, 5, 7, 11],
    'num_bands': 2,
    'band_base_hz': 500.0,
    'fir_order': 16,
    'encoder_num_freqs': 4,
    'mlp_schedule': [[float('inf'), 1, 8]],
    'edc_mask_prob': 1.0,
    'learning_rate': 1e-2,
    'epochs': 1,
    'batch_size': 4,
    'stft_window_ms': 8.0,
    'stft_overlap': 0.75,
}

TINY_ROOM = {
    't60_table': [[0.03, 0.025], [0.015, 0.012]],
    'near_amplitudes': [[1.0, 1.0], [0.1, 0.1]],
    'far_amplitudes': [[0.2, 0.2], [1.0, 1.0]],
    'transition_width': 0.1,
    'rir_length_s': 0.04,
}


def write_json(path, document):
    path.write_text(json.dumps(document), encoding='utf-8')
    return path


@pytest.fixture
def run_file(tmp_path):
    """Run file for a two-band 2 x 2 network at 8 kHz"""
    return write_json(tmp_path / 'run.json', TINY_RUN)


@pytest.fixture
def room_file(tmp_path):
    return write_json(tmp_path / 'room.json', TINY_ROOM)


@pytest.fixture
def make_dataset():
    """Factory for small decaying-noise datasets"""

    def _make(num_positions=6, length=320, seed=0, **kwargs):
        rng = np.random.default_rng(seed)
        envelope = np.exp(-6.91 * np.arange(length) / 240.0)
        return RIRDataset(
            sample_rate=8000,
            source_position=[0.2, 0.2, 1.5],
            receiver_positions=rng.uniform(0.0, 2.0, (num_positions, 3)),
            rirs=rng.standard_normal((num_positions, length)) * envelope,
            **kwargs,
        )

    return _make
