import os
from pathlib import Path

import numpy as np
import pytest

MNIST_DIR = Path(os.environ.get("TCL_MNIST_DIR", "/root/data/mnist"))


def have_mnist():
    return (MNIST_DIR / "t10k-images-idx3-ubyte").exists()


needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST not found under {MNIST_DIR}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
