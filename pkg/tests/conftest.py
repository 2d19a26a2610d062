import os
from pathlib import Path

import numpy as np
import pytest

from mdmixer.config import ModelConfig
from mdmixer.data import SeriesFrame

# Small enough that finite differences over every parameter run in seconds.
TINY = dict(lookback=8, horizon=4, channels=2, patch_len=4, stride=2,
            embed_dim=3, heads=2, hidden=4, kernel=3)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


def make_frame(values) -> SeriesFrame:
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 1:
        values = values[:, None]
    rows, cols = values.shape
    return SeriesFrame(values, [f"t{i}" for i in range(rows)],
                       [f"ch{c}" for c in range(cols)])


def rand_batch(rng, b, t, c, dtype=np.float32):
    return rng.normal(0.0, 1.0, size=(b, t, c)).astype(dtype)


def dataset_path(name: str) -> Path | None:
    """Locate a benchmark CSV under $MDMIXER_DATA_DIR or ./data."""
    roots = []
    if os.environ.get("MDMIXER_DATA_DIR"):
        roots.append(Path(os.environ["MDMIXER_DATA_DIR"]))
    roots.append(Path(__file__).resolve().parent.parent / "data")
    for root in roots:
        candidate = root / name
        if candidate.exists():
            return candidate
    return None
