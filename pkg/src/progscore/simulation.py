"""Synthetic longitudinal datasets from a known model and recovery metrics."""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .data import Dataset, DataError, VoxelGrid
from .params import ModelParams
from .spatial import KernelFamily, NoiseCov, build_correlation, nu_from_v

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w


@dataclass
class SimDesign:
    """Simulation design.

    The trajectory parameters are drawn once from ``theta_seed`` (uniform in
    the given ranges); subjects, visits and noise come from ``seed``. The
    defaults are a convention, chosen to resemble an amyloid PET cohort.
    """

    n: int = 100
    max_visits: int = 7
    baseline_age_min: float = 55.0
    baseline_age_max: float = 93.0
    visit_gap: float = 1.5
    grid_shape: tuple[int, int, int] = (5, 5, 5)
    spacing_mm: float = 4.0
    roi_axis: int = 0
    m: tuple[float, float] = (0.05, -3.5)
    prior_sd: tuple[float, float] = (0.02, 1.0)
    prior_corr: float = -0.3
    a_range: tuple[float, float] = (0.0, 0.03)
    b_range: tuple[float, float] = (0.9, 1.3)
    lambda_range: tuple[float, float] = (0.05, 0.15)
    family: str = "rational_quadratic"
    rho: float = 4.5
    theta_seed: int = 20160101
    seed: int = 0

    def __post_init__(self):
        self.grid_shape = tuple(int(x) for x in self.grid_shape)
        for name in ("m", "prior_sd", "a_range", "b_range", "lambda_range"):
            setattr(self, name, tuple(float(x) for x in getattr(self, name)))
        if self.n < 2 or self.max_visits < 1 or len(self.grid_shape) != 3:
            raise DataError("invalid design: need n >= 2, max_visits >= 1 and a 3-D grid")
        if min(self.prior_sd) < 0 or not -1 < self.prior_corr < 1:
            raise DataError("invalid design: prior SDs must be >= 0 and |corr| < 1")
        if self.lambda_range[0] <= 0:
            raise DataError("invalid design: noise SDs must be positive")

    @property
    def K(self) -> int:
        return int(np.prod(self.grid_shape))

    def grid(self) -> VoxelGrid:
        return VoxelGrid.regular(self.grid_shape, self.spacing_mm, self.roi_axis)

    def prior_cov(self) -> np.ndarray:
        sa, sb = self.prior_sd
        c = self.prior_corr * sa * sb
        return np.array([[sa * sa, c], [c, sb * sb]])

    def theta_true(self) -> ModelParams:
        rng = np.random.default_rng(self.theta_seed)
        K = self.K
        a = rng.uniform(*self.a_range, size=K)
        b = rng.uniform(*self.b_range, size=K)
        lam = rng.uniform(*self.lambda_range, size=K)
        grid = self.grid()
        corr = build_correlation(grid.distances, self.family, self.rho)
        noise = NoiseCov.scaled(corr, 1.0, lam) if not corr.is_identity else NoiseCov.independent(lam)
        V = self.prior_cov()
        if not np.linalg.eigvalsh(V)[0] > 0:
            # keeps the log-Cholesky map defined for degenerate designs
            V = V + 1e-12 * np.eye(2)
        return ModelParams(a, b, np.array(self.m), nu_from_v(V), noise)

    def to_toml(self) -> str:
        d = asdict(self)
        d["grid_shape"] = list(self.grid_shape)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return tomli_w.dumps(d)

    @classmethod
    def from_toml(cls, text: str) -> "SimDesign":
        raw = tomllib.loads(text)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise DataError(f"unknown design keys: {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "SimDesign":
        return cls.from_toml(Path(path).read_text(encoding="utf-8"))


@dataclass(eq=False)
class SimTruth:
    theta: ModelParams
    u: np.ndarray  # (n, 2)
    s: np.ndarray  # (N,) in dataset row order

    def standardized(self, dataset: Dataset):
        """Truth expressed on the standardized score scale of its own baseline scores.

        Returns (theta*, u*, s*) so estimates and truth share one gauge.
        """
        from .em import reparameterize

        s0 = self.s[dataset.baseline_rows]
        mu = s0.mean()
        sd = np.sqrt(np.mean((s0 - mu) ** 2))
        w = 1.0 / sd
        if np.mean(self.theta.a) < 0:
            w = -w
        z = -w * mu
        return (reparameterize(self.theta, w, z), w * self.u + np.array([0.0, z]),
                w * self.s + z)


def simulate(design: SimDesign, theta: ModelParams | None = None) -> tuple[Dataset, SimTruth]:
    """Draw subjects, visit ages, scores and correlated noise for ``design``."""
    theta = design.theta_true() if theta is None else theta
    grid = design.grid()
    if theta.K != grid.K:
        raise DataError("theta and grid disagree on K")
    rng = np.random.default_rng(design.seed)
    n, K = design.n, grid.K
    V = theta.V
    u = rng.multivariate_normal(theta.m, V, size=n, method="cholesky")
    counts = rng.integers(1, design.max_visits + 1, size=n)
    base = rng.uniform(design.baseline_age_min, design.baseline_age_max, size=n)
    subject = np.repeat(np.arange(n), counts)
    visit = np.concatenate([np.arange(1, c + 1) for c in counts])
    ages = base[subject] + design.visit_gap * (visit - 1)
    s = ages * u[subject, 0] + u[subject, 1]
    N = len(ages)
    z = rng.standard_normal((N, K))
    noise = theta.noise
    eps = z if noise.corr.is_identity else z @ noise.corr.chol.T
    eps = eps * noise.scale
    Y = np.outer(s, theta.a) + theta.b + eps
    ids = tuple(f"S{i + 1:04d}" for i in range(n))
    d = Dataset(grid, ids, subject, visit, ages, Y)
    return d, SimTruth(theta, u, s)


def cosine_similarity(estimate, truth) -> float:
    estimate = np.ravel(np.asarray(estimate, dtype=float))
    truth = np.ravel(np.asarray(truth, dtype=float))
    if estimate.shape != truth.shape:
        raise ValueError("length mismatch")
    ne, nt = np.linalg.norm(estimate), np.linalg.norm(truth)
    if ne == 0 or nt == 0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.clip(truth @ estimate / (nt * ne), -1.0, 1.0))


def percent_correct(cis, truth) -> float:
    """Percentage of elements whose truth lies inside [lo, hi]."""
    cis = np.asarray(cis, dtype=float)
    truth = np.ravel(np.asarray(truth, dtype=float))
    if cis.shape != (len(truth), 2):
        raise ValueError("intervals and truth lengths differ")
    inside = (cis[:, 0] <= truth) & (truth <= cis[:, 1])
    return 100.0 * float(inside.mean())


def duplicate_biomarkers(dataset: Dataset, voxel_ids, copies: int = 1) -> Dataset:
    """Append ``copies`` exact copies of the chosen voxel columns at the same positions."""
    voxel_ids = list(voxel_ids)
    index = {v: k for k, v in enumerate(dataset.grid.voxel_ids)}
    missing = [v for v in voxel_ids if v not in index]
    if missing:
        raise DataError(f"unknown voxel ids: {missing}")
    if not voxel_ids or copies < 1:
        return dataset
    g = dataset.grid
    cols = [index[v] for v in voxel_ids] * copies
    new_ids = [f"{g.voxel_ids[k]}_dup{c + 1}" for c in range(copies) for k in (index[v] for v in voxel_ids)]
    grid = VoxelGrid(
        g.voxel_ids + tuple(new_ids),
        np.vstack([g.positions, g.positions[cols]]),
        None if g.roi_labels is None else g.roi_labels + tuple(g.roi_labels[k] for k in cols),
    )
    return dataset.with_columns(grid, np.hstack([dataset.Y, dataset.Y[:, cols]]))


def write_truth(truth: SimTruth, dataset: Dataset, directory) -> None:
    """``truth_subjects.csv``, ``truth_visits.csv`` and ``theta_true.json``."""
    directory = Path(directory)
    with open(directory / "truth_subjects.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "alpha", "beta"])
        for sid, (al, be) in zip(dataset.subject_ids, truth.u):
            w.writerow([sid, repr(float(al)), repr(float(be))])
    with open(directory / "truth_visits.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "visit_index", "age", "s"])
        for r in range(dataset.N):
            w.writerow([dataset.subject_ids[dataset.subject[r]], int(dataset.visit_index[r]),
                        repr(float(dataset.ages[r])), repr(float(truth.s[r]))])
    th = truth.theta
    payload = {
        "a": th.a.tolist(), "b": th.b.tolist(), "m": th.m.tolist(), "nu": th.nu.tolist(),
        "V": th.V.tolist(), "lambda_diag": th.noise.scale.tolist(),
        "kernel_family": th.noise.family.value, "rho": th.noise.rho,
    }
    (directory / "theta_true.json").write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
