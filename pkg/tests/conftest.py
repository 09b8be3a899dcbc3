import sys
from pathlib import Path

import numpy as np
import pytest

# Add the repo root (parent of /tests) to Python's import path
REPO_ROOT = Path(__file__).resolve().parents[1]
if str(REPO_ROOT) not in sys.path:
    sys.path.insert(0, str(REPO_ROOT))

from app.core.schemas import ASTConfig, PatchGrid  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """16 mels x 40 frames, 8x8 patches without overlap: a 2 x 5 grid of 10 patches."""
    return ASTConfig(
        embed_dim=8, depth=2, heads=2, mlp_ratio=2,
        grid=PatchGrid(patch_f=8, patch_t=8, stride_f=8, stride_t=8),
        num_classes=3, multi_label=True, target_frames=40, n_mels=16,
    )


@pytest.fixture
def toy_config():
    """Full 128-mel input at 128 frames, 16x16 patches, one small block."""
    return ASTConfig(
        embed_dim=16, depth=1, heads=2, mlp_ratio=2,
        grid=PatchGrid.square(16, 0),
        num_classes=4, multi_label=True, target_frames=128, n_mels=128,
    )


@pytest.fixture
def toy_corpus(tmp_path):
    """16 one-second clips over 4 classes, all in the train split."""
    from app.core.dataset import synth_dataset

    out = tmp_path / "corpus"
    synth_dataset(16, 4, seed=0, out_dir=out, min_seconds=1.0, max_seconds=1.0, eval_fraction=0.0)
    return out
