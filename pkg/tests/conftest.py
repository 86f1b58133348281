import numpy as np
import pytest

from acde.dataset import Dataset
from acde.simulation import generate_dataset
from acde.streams import substream

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def toy():
    """Three individuals, each window holding exactly one candidate."""
    return Dataset.from_arrays(y=[0.0, 1.0, 2.0], z=[5.0, 4.7, 5.3], x=[0.0, 0.1, 0.2])


@pytest.fixture
def toy_csv(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_text("y,z,x1\n0,5.0,0\n1,4.7,0.1\n2,5.3,0.2\n")
    return path


@pytest.fixture(scope="session")
def sim200():
    """Three-covariate simulated sample, N=200."""
    return generate_dataset(3, 200, substream(1))


def random_dataset(rng, n, d, duplicates=False, z_grid=False):
    x = rng.standard_normal((n, d))
    if duplicates:
        src = rng.integers(0, n, size=n // 3)
        dst = rng.integers(0, n, size=n // 3)
        x[dst] = x[src]
        x[rng.integers(0, n, size=n // 4)] = x[0]
    z = rng.uniform(0, 10, n)
    if z_grid:
        z = np.round(z * 4) / 4
    y = rng.standard_normal(n) + z
    return Dataset.from_arrays(y, z, x)
