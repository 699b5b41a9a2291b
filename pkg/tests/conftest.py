import pathlib

import pytest

from reuselab import SeededRng, init_weights
from reuselab.checkpoint import load_weights
from reuselab.train import train_toy

REPO_ROOT = pathlib.Path(__file__).resolve().parent.parent
TRAINED_CKPT = REPO_ROOT / "artifacts" / "toy_seed0.ckpt"


@pytest.fixture(scope="session")
def tiny_weights():
    """Untrained weights; enough for contract and determinism tests."""
    return init_weights(SeededRng(0))


@pytest.fixture(scope="session")
def trained_weights():
    """Default-config seed-0 checkpoint, trained once and cached on disk."""
    if not TRAINED_CKPT.exists():
        TRAINED_CKPT.parent.mkdir(parents=True, exist_ok=True)
        train_toy(seed=0, checkpoint_path=TRAINED_CKPT)
    return load_weights(TRAINED_CKPT)
