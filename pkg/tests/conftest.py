import numpy as np
import pytest
import torch

from animotion.config import apply_overrides, desk_config
from animotion.dataset import synth_clip


def tiny_config(**train):
    """Desk profile shrunk to 32x32 so model-level tests run in seconds."""
    overrides = {
        "model": {
            "resolution": 32,
            "detector": {"num_kp": 4, "block_expansion": 8, "max_features": 32},
            "dense_motion": {"block_expansion": 8, "max_features": 32},
            "generator": {"block_expansion": 8, "max_features": 16, "num_bottleneck_blocks": 2},
            "discriminator": {"block_expansion": 8, "max_features": 32},
        },
        "train": {"batch_size": 2, "num_repeats": 1, "pyramid": [32, 16], **train},
    }
    return apply_overrides(desk_config(), overrides)


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture(scope="session")
def small_clips():
    rng = np.random.default_rng(7)
    return [synth_clip(rng, frames_per_clip=8, resolution=32, clip_id=f"c{i}") for i in range(3)]


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(RESULTS, key=lambda n: int(n.split("-")[1])):
        ok, detail = RESULTS[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}: {detail}")
