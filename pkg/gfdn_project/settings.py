"""
Django settings for gfdn_project project.

The project has no web surface: Django provides the configuration layer,
the management-command CLI and the test runner integration. All run defaults
live in the ``GFDN`` dict below and are merged with per-run JSON/TOML files
by ``cli_io.config.RunConfig``.
"""

from pathlib import Path
import os

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get("GFDN_SECRET_KEY", "gfdn-offline-toolkit-no-sessions")

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "gfdn_core",
    "freq_domain",
    "filterbank",
    "analysis",
    "autodiff_train",
    "common_slopes",
    "cli_io",
]

# No database is used; datasets and checkpoints are JSON + WAV files.
DATABASES = {}

USE_TZ = True

TIME_ZONE = "UTC"


# Worker threads for batch evaluation, dataset generation and partitioned
# frequency evaluation.
GFDN_NUM_THREADS = max(1, int(os.environ.get("GFDN_NUM_THREADS", "1")))

# Output directory used when a command is given no explicit path.
GFDN_OUTPUT_DIR = Path(os.environ.get("GFDN_OUTPUT_DIR", BASE_DIR / "runs"))

GFDN = {
    "sample_rate": 32000,
    # topology
    "num_groups": 3,
    "delays_per_group": 4,
    "delay_range_s": (0.02, 0.05),
    "direct_gain": 0.0,
    # subbands
    "band_base_hz": 63.0,
    "num_bands": 8,
    "fir_order": 4096,
    # positional encoding
    "encoder_f_min": 1.0,
    "encoder_f_max": 32.0,
    "encoder_num_freqs": 20,
    # per-band MLP schedule: (hidden layers, neurons) keyed by the highest
    # band centre (Hz) the entry applies to
    "mlp_schedule": [
        [125.0, 1, 16],
        [500.0, 5, 16],
        [float("inf"), 3, 128],
    ],
    "learn_source_gains": False,
    # losses
    "loss_weights": {"edc": 10.0, "edr": 1.0, "spectral": 1.0, "sparsity": 1.0},
    "edc_mask_prob": 0.5,
    # optimizer
    "learning_rate": 1e-3,
    "betas": (0.9, 0.999),
    "adam_eps": 1e-8,
    "epochs": 15,
    "batch_size": 32,
    "seed": 0,
    "split_fraction": 0.8,
    # analysis
    "stft_window_ms": 64.0,
    "stft_overlap": 0.75,
    "ned_window_ms": 20.0,
    "ned_hop_ms": 10.0,
}


LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "verbose": {
            "format": "{asctime} {levelname} {name}: {message}",
            "style": "{",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "verbose",
        },
    },
    "root": {
        "handlers": ["console"],
        "level": os.environ.get("GFDN_LOG_LEVEL", "INFO"),
    },
}
