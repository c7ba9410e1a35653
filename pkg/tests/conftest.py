import numpy as np
import pytest

from drl2o import instances as I
from drl2o.conic import SolverSettings

ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tight():
    return SolverSettings.tight(1e-9)


@pytest.fixture(scope="session")
def quad_ds():
    return I.sample_quadratic_dataset(6, 1.0, 10.0, 1.0, {"train": 12, "val": 4, "test": 6, "test_ood": 4},
                                      seed=3, L_ood=20.0)


@pytest.fixture(scope="session")
def lasso_ds():
    return I.sample_lasso_dataset(5, 8, 0.2, 1.0, 0.05, 0.5, {"train": 10, "val": 3, "test": 4},
                                  seed=5, presolve_count=60)


@pytest.fixture(scope="session")
def tv_ds():
    imgs = I.synthetic_images(12, (4, 5), seed=7)
    return I.sample_tv_dataset(imgs, {"train": 6, "val": 2, "test": 2}, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
