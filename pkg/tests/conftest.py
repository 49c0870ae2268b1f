import os
from pathlib import Path

import numpy as np
import pytest

from ccsnet.data import Dataset, find_mnist
from ccsnet.nn import Dense, Network


def tiny_net(seed=0, sizes=(4, 6, 3), activation="sigmoid", scale=1.0):
    rng = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(sizes, sizes[1:])):
        act = activation if i < len(sizes) - 2 else "identity"
        layers.append(Dense(scale * rng.standard_normal((b, a)), rng.standard_normal(b), act))
    return Network(layers)


def blob_data(n=120, d=4, k=3, seed=0):
    rng = np.random.default_rng(seed)
    centres = 2.0 * rng.standard_normal((k, d))
    labels = np.arange(n) % k
    return Dataset(centres[labels] + 0.3 * rng.standard_normal((n, d)), labels, k)


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    """Full MNIST when ``CCSNET_MNIST_DIR`` points at it, else the 5,000-digit sample."""
    env = os.environ.get("CCSNET_MNIST_DIR")
    if env:
        find_mnist(env, "train")
        return Path(env)
    pytest.importorskip("mlxtend")
    from ccsnet.data import write_mnist_sample

    out = tmp_path_factory.mktemp("mnist")
    write_mnist_sample(out)
    return out


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one ``PASS``/``FAIL`` line per acceptance criterion."""

    def log(number, ok, text):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {text}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
