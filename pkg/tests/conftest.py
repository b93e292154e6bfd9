import os
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE_LINES: list[str] = []


def _mnist_candidates():
    env = os.environ.get("VITAE_MNIST_DIR")
    if env:
        yield Path(env)
    yield Path(__file__).resolve().parents[1] / "data" / "mnist"
    yield Path("/root/data/mnist")


def find_mnist():
    for d in _mnist_candidates():
        if (d / "t10k-images-idx3-ubyte").exists() or (d / "t10k-images-idx3-ubyte.gz").exists():
            return d
    return None


@pytest.fixture(scope="session")
def mnist_dir():
    d = find_mnist()
    if d is None:
        pytest.skip("MNIST IDX files not found; set VITAE_MNIST_DIR")
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def overfit_run():
    """tiny-desk trained for 500 AdamW steps on one fixed 64-sample batch (run once per session)."""
    from vitae.config import preset
    from vitae.data import MNIST_MEAN, MNIST_STD, Dataset, load_mnist, normalize
    from vitae.model import build
    from vitae.training import OptimConfig, fit

    d = find_mnist()
    if d is not None:
        ds = load_mnist(d, "train").subset(slice(0, 64))
        ds = Dataset(normalize(ds.images, MNIST_MEAN, MNIST_STD), ds.labels)
    else:
        g = np.random.default_rng(0)
        ds = Dataset(g.standard_normal((64, 1, 32, 32)).astype(np.float32), g.integers(0, 10, 64))
    cfg = preset("tiny-desk", in_chans=1)
    optim = OptimConfig(lr=1e-3, batch_size=64)
    logs = [fit(build(cfg, seed=7), ds, 500, seed=7, optim=optim) for _ in range(2)]
    return logs


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
