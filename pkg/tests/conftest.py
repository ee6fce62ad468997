import logging

import numpy as np
import pytest

from progscore.data import Dataset, VoxelGrid
from progscore.params import ModelParams
from progscore.spatial import KernelFamily, NoiseCov, build_correlation, nu_from_v


def random_grid(rng, K, roi=False):
    pos = rng.uniform(0, 12, size=(K, 3))
    labels = tuple(f"r{k % 2}" for k in range(K)) if roi else None
    return VoxelGrid(tuple(f"v{k}" for k in range(K)), pos, labels)


def random_dataset(rng, n=4, K=3, max_visits=3, grid=None):
    grid = grid or random_grid(rng, K)
    counts = rng.integers(1, max_visits + 1, size=n)
    subject = np.repeat(np.arange(n), counts)
    visit = np.concatenate([np.arange(1, c + 1) for c in counts])
    base = rng.uniform(60, 80, size=n)
    ages = base[subject] + 1.5 * (visit - 1) + rng.uniform(0, 0.3, size=len(subject))
    Y = rng.normal(1.0, 0.3, size=(len(subject), grid.K))
    return Dataset(grid, tuple(f"s{i}" for i in range(n)), subject, visit, ages, Y)


def random_theta(rng, grid, family=None, stage=2):
    K = grid.K
    a = rng.normal(0.3, 0.2, size=K)
    b = rng.normal(1.0, 0.2, size=K)
    m = np.array([rng.normal(0.05, 0.02), rng.normal(-3.0, 0.5)])
    L = np.array([[rng.uniform(0.01, 0.05), 0.0], [rng.normal(0, 0.02), rng.uniform(0.3, 1.0)]])
    V = L @ L.T
    lam = rng.uniform(0.1, 0.4, size=K)
    if stage == 1:
        noise = NoiseCov.independent(lam)
    else:
        family = family or rng.choice([f.value for f in KernelFamily if f is not KernelFamily.Identity])
        corr = build_correlation(grid.distances, family, rng.uniform(2.0, 6.0))
        noise = NoiseCov.scaled(corr, rng.uniform(0.7, 1.3), lam)
    return ModelParams(a, b, m, nu_from_v(V), noise)


def synth_dataset(rng, theta, grid, n=30, max_visits=3):
    """Dataset drawn from ``theta`` with ages spread like the default design."""
    counts = rng.integers(1, max_visits + 1, size=n)
    subject = np.repeat(np.arange(n), counts)
    visit = np.concatenate([np.arange(1, c + 1) for c in counts])
    ages = rng.uniform(55, 90, size=n)[subject] + 1.5 * (visit - 1)
    u = rng.multivariate_normal(theta.m, theta.V, size=n)
    s = ages * u[subject, 0] + u[subject, 1]
    R = theta.noise.dense()
    eps = rng.multivariate_normal(np.zeros(grid.K), R, size=len(s))
    Y = np.outer(s, theta.a) + theta.b + eps
    return Dataset(grid, tuple(f"s{i}" for i in range(n)), subject, visit, ages, Y)


@pytest.fixture(autouse=True)
def _quiet_logs():
    logging.getLogger("progscore").setLevel(logging.ERROR)
    yield
    logging.getLogger("progscore").setLevel(logging.NOTSET)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
