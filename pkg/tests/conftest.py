import os

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("capskit", max_examples=60, deadline=None)
settings.load_profile("capskit")

DATA_ROOT = os.environ.get("CAPSKIT_DATA_DIR", "/root/data")


def _mnist_dir():
    for cand in (os.path.join(DATA_ROOT, "mnist"), DATA_ROOT):
        if os.path.exists(os.path.join(cand, "train-images-idx3-ubyte")) or \
                os.path.exists(os.path.join(cand, "train-images-idx3-ubyte.gz")):
            return cand
    return None


def _cifar_dir():
    for cand in (os.path.join(DATA_ROOT, "cifar10"), DATA_ROOT):
        if os.path.exists(os.path.join(cand, "data_batch_1.bin")):
            return cand
    return None


@pytest.fixture(scope="session")
def mnist_dir():
    d = _mnist_dir()
    if d is None:
        pytest.skip("MNIST IDX files not found; set CAPSKIT_DATA_DIR")
    return d


@pytest.fixture(scope="session")
def mnist(mnist_dir):
    from capskit import data
    return data.load_mnist(mnist_dir, "train"), data.load_mnist(mnist_dir, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the test run
ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        status = "PASS" if passed else "FAIL"
        ACCEPTANCE_LINES[number] = f"criterion {number}: {status}  {detail}"
        print(ACCEPTANCE_LINES[number])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES and not SKIPPED_CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(set(ACCEPTANCE_LINES) | set(SKIPPED_CRITERIA)):
        terminalreporter.write_line(ACCEPTANCE_LINES.get(n) or
                                    f"criterion {n}: SKIP  {SKIPPED_CRITERIA[n]}")


SKIPPED_CRITERIA = {}


def skip_criterion(number, reason):
    SKIPPED_CRITERIA[number] = reason
    pytest.skip(reason)
