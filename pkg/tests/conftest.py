from pathlib import Path

import pytest
import torch

from sar2opt.config import parse_config

REPO_ROOT = Path(__file__).resolve().parents[1]
FIXTURE_DIR = REPO_ROOT / "fixtures" / "sen12-synthetic"

# Where a flattened override key lives in the raw config mapping.
_SECTION_OF = {
    "root": "data",
    "tile_size": "data",
    "T": "schedule",
    "variance_mode": "schedule",
    "base_channels": "model",
    "channel_mults": "model",
    "time_dim": "model",
    "color_weight": "loss",
    "blur_kernel_size": "loss",
    "blur_sigma": "loss",
    "peak_lr": "optimizer",
    "warmup_steps": "optimizer",
    "weight_decay": "optimizer",
    "iterations": "training",
    "batch_size": "training",
    "seed": "training",
    "log_interval": "training",
    "checkpoint_interval": "training",
    "ema": "training",
    "ema_decay": "training",
}


@pytest.fixture(scope="session")
def fixture_dir() -> Path:
    assert FIXTURE_DIR.is_dir(), (
        "bundled fixture missing; run: sar2opt make-fixture --out fixtures/sen12-synthetic"
    )
    return FIXTURE_DIR


@pytest.fixture
def tiny_config():
    """Factory for a fast throwaway training config for loop-mechanics tests."""

    def build(run_dir, **overrides):
        raw = {
            "data": {"root": str(FIXTURE_DIR), "tile_size": 64},
            "schedule": {"T": 50},
            "model": {"base_channels": 8, "channel_mults": [1, 2], "time_dim": 16},
            "loss": {"blur_kernel_size": 9, "blur_sigma": 2.0},
            "optimizer": {"peak_lr": 1.0e-3, "warmup_steps": 5},
            "training": {
                "iterations": 8,
                "batch_size": 4,
                "seed": 7,
                "log_interval": 1,
                "checkpoint_interval": 4,
            },
            "run": {"dir": str(run_dir)},
        }
        for key, value in overrides.items():
            raw[_SECTION_OF[key]][key] = value
        return parse_config(raw)

    return build


def seeded(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(seed)
