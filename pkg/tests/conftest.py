import os

# single-threaded BLAS so bitwise-determinism tests compare like with like
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from derain_app.config import MICRO  # noqa: E402
from derain_app.model import init_parameters  # noqa: E402
from derain_app.tensor import precision  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance experiments (set NLEDN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.getenv("NLEDN_SLOW"):
        return
    skip = pytest.mark.skip(reason="set NLEDN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    with precision(np.float64):
        yield


@pytest.fixture
def micro():
    return replace(MICRO)


@pytest.fixture
def random_micro_model(rng):
    """MICRO model with every parameter (fusion and exit included) drawn at random."""
    model = init_parameters(replace(MICRO))
    for name, p in model.named_parameters():
        p.data = rng.uniform(-0.3, 0.3, size=p.shape).astype(np.float32)
    return model


def write_png(path: Path, pixels: np.ndarray) -> Path:
    """pixels: H x W x 3 uint8."""
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(path, format="PNG")
    return path


@pytest.fixture
def png_corpus(tmp_path, rng):
    """Three random 8-bit RGB PNGs of assorted sizes under tmp_path/clean."""
    folder = tmp_path / "clean"
    for i, (h, w) in enumerate([(16, 16), (24, 16), (20, 28)]):
        write_png(folder / f"img{i}.png", rng.integers(0, 256, size=(h, w, 3)))
    return folder
