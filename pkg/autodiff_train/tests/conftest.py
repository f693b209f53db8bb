from types import SimpleNamespace

import numpy as np
import pytest

from autodiff_train.models import FourierEncoder, LossWeights, TrainingConfig


@pytest.fixture
def tiny_config():
    """Factory for a two-band, 2 x 2 network configuration at 8 kHz"""

    def _make(**overrides):
        values = dict(
            num_groups=2,
            delays_per_group=2,
            delay_range_s=(0.0005, 0.002),
            num_bands=2,
            band_base_hz=500.0,
            fir_order=16,
            encoder=FourierEncoder(1.0, 32.0, 4),
            mlp_schedule=((float('inf'), 1, 8),),
            learn_source_gains=False,
            loss_weights=LossWeights(),
            edc_mask_prob=1.0,
            learning_rate=1e-2,
            betas=(0.9, 0.999),
            adam_eps=1e-8,
            epochs=0,
            batch_size=4,
            seed=0,
            stft_window_ms=8.0,
            stft_overlap=0.75,
            delay_lengths=(3, 5, 7, 11),
        )
        values.update(overrides)
        return TrainingConfig(**values)

    return _make


@pytest.fixture
def tiny_dataset():
    """Eight receivers whose decaying-noise RIRs change level with position"""
    fs = 8000
    rng = np.random.default_rng(5)
    receivers = rng.uniform(0.5, 2.5, (8, 3))
    n = np.arange(300)
    envelope = np.exp(-6.91 * n / (0.03 * fs))
    level = 1.0 + 0.5 * np.sin(receivers[:, 0])
    rirs = level[:, None] * rng.standard_normal((8, n.size)) * envelope
    return SimpleNamespace(
        sample_rate=fs,
        source_position=np.array([1.0, 1.5, 1.2]),
        receiver_positions=receivers,
        rirs=rirs,
        t60_table=np.array([[0.03, 0.025], [0.02, 0.018]]),
    )
