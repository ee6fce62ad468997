"""Subject-level bootstrap, percentile intervals, ROI trajectories and the
regional level/rate tests.

Random streams: replicate ``r`` of a run seeded with ``seed`` draws its
subject indices from ``Generator(Philox(SeedSequence(seed, spawn_key=(r,))))``
as ``integers(0, n, size=n)``. Philox is counter-based, so every replicate's
stream is fixed by (seed, r) alone and replicates can run in any order.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Dataset, DataError, VoxelGrid
from .em import FitConfig, FittedModel, fit
from .errors import NumericalError
from .estep import e_step
from .params import ModelParams

logger = logging.getLogger(__name__)

MIN_REPLICATES = 20


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(replicate,))))


def resample_indices(n: int, seed: int, replicate: int) -> np.ndarray:
    return replicate_rng(seed, replicate).integers(0, n, size=n)


@dataclass(eq=False)
class BootstrapSamples:
    """Standardized estimates of every usable replicate, stacked along axis 0.

    ``alpha``, ``beta`` and ``s`` are the original subjects and visits scored
    under each replicate's parameters.
    """

    B: int
    seed: int
    family: str
    rho_fixed: float | None
    grid: VoxelGrid
    replicate: np.ndarray  # indices of usable replicates
    indices: np.ndarray  # (B, n) resampled subject indices, all replicates
    a: np.ndarray
    b: np.ndarray
    m: np.ndarray
    V: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    s: np.ndarray
    excluded: list[tuple[int, str]] = field(default_factory=list)
    roi_names: tuple[str, ...] = ()
    roi_a: np.ndarray | None = None  # (replicates, ROIs) ROI-mean slopes
    roi_b: np.ndarray | None = None

    def __post_init__(self):
        if self.roi_a is None and self.grid.roi_labels is not None:
            rois = self.grid.rois()
            self.roi_names = tuple(rois)
            self.roi_a = np.column_stack([self.a[:, ix].mean(axis=1) for ix in rois.values()])
            self.roi_b = np.column_stack([self.b[:, ix].mean(axis=1) for ix in rois.values()])

    @property
    def n_usable(self) -> int:
        return len(self.replicate)

    def quantity(self, name: str) -> np.ndarray:
        """(replicates, elements) array for a named quantity."""
        if name == "V":
            return self.V.reshape(len(self.V), 4)
        if name in ("lambda", "lam"):
            return self.lam.reshape(-1, 1)
        if name not in ("a", "b", "m", "alpha", "beta", "s"):
            raise KeyError(f"unknown bootstrap quantity {name!r}")
        return getattr(self, name)

    def theta(self, r: int) -> tuple[np.ndarray, np.ndarray]:
        return self.a[r], self.b[r]

    def roi_summaries(self, s_values) -> dict[str, np.ndarray]:
        """ROI-mean trajectory at each score, shape (replicates, len(s_values)) per ROI."""
        if self.roi_a is None:
            raise DataError("grid has no ROI labels")
        s_values = np.atleast_1d(np.asarray(s_values, dtype=float))
        return {r: self.roi_a[:, j, None] * s_values + self.roi_b[:, j, None]
                for j, r in enumerate(self.roi_names)}


def _replicate(dataset: Dataset, cfg: FitConfig, seed: int, r: int):
    idx = resample_indices(dataset.n, seed, r)
    try:
        model = fit(dataset.resample(idx), cfg)
    except NumericalError as exc:
        return r, idx, None, f"numerical failure: {exc}"
    if not model.converged:
        return r, idx, None, "not converged"
    return r, idx, model, ""


def bootstrap(dataset: Dataset, full_fit: FittedModel, B: int, seed: int,
              config: FitConfig | None = None, n_jobs: int = 1) -> BootstrapSamples:
    """Refit on ``B`` subject resamples with the full-sample kernel and range held fixed."""
    base = config or FitConfig()
    cfg = replace(base, kernel=full_fit.family.value, fixed_rho=full_fit.rho,
                  stages=1 if full_fit.stage == "IndependentNoise" else 2)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            results = list(ex.map(lambda r: _replicate(dataset, cfg, seed, r), range(B)))
    else:
        results = [_replicate(dataset, cfg, seed, r) for r in range(B)]

    keep, excluded = [], []
    indices = np.empty((B, dataset.n), dtype=np.int64)
    cols: dict[str, list] = {k: [] for k in ("a", "b", "m", "V", "lam", "alpha", "beta", "s")}
    for r, idx, model, why in results:
        indices[r] = idx
        if model is None:
            excluded.append((r, why))
            continue
        keep.append(r)
        th = model.theta
        post = e_step(dataset, th)
        cols["a"].append(th.a)
        cols["b"].append(th.b)
        cols["m"].append(th.m)
        cols["V"].append(th.V)
        cols["lam"].append(th.noise.lam if th.noise.lam is not None else np.nan)
        cols["alpha"].append(post.u_hat[:, 0])
        cols["beta"].append(post.u_hat[:, 1])
        cols["s"].append(post.s)
    if excluded:
        logger.warning("%d of %d bootstrap replicates excluded", len(excluded), B)
    K, n, N = dataset.K, dataset.n, dataset.N
    shapes = {"a": (K,), "b": (K,), "m": (2,), "V": (2, 2), "lam": (), "alpha": (n,),
              "beta": (n,), "s": (N,)}
    arr = {k: np.array(v, dtype=float).reshape((len(keep),) + shapes[k]) for k, v in cols.items()}
    return BootstrapSamples(B=B, seed=seed, family=full_fit.family.value, rho_fixed=full_fit.rho,
                            grid=dataset.grid, replicate=np.array(keep, dtype=np.int64),
                            indices=indices, excluded=excluded, **arr)


def percentile_interval(values, level: float = 0.95) -> np.ndarray:
    """Per-column (lo, hi) empirical quantiles with linear interpolation between order statistics."""
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    if len(values) < MIN_REPLICATES:
        raise ValueError(f"need at least {MIN_REPLICATES} usable replicates, got {len(values)}")
    tail = (1.0 - level) / 2.0
    return np.quantile(values, [tail, 1.0 - tail], axis=0, method="linear").T


def ci(samples: BootstrapSamples, quantity: str, level: float = 0.95) -> np.ndarray:
    return percentile_interval(samples.quantity(quantity), level)


def roi_trajectory(theta: ModelParams, grid: VoxelGrid, roi: str, s):
    """ROI-mean of a_k s + b_k."""
    rois = grid.rois()
    if roi not in rois or len(rois[roi]) == 0:
        raise DataError(f"unknown or empty ROI {roi!r}")
    ix = rois[roi]
    return float(theta.a[ix].mean()) * np.asarray(s, dtype=float) + float(theta.b[ix].mean())


@dataclass
class HypothesisResult:
    statistic_samples: np.ndarray
    p_value: float
    level_s: float | None
    roi: str
    clamped: bool

    def record(self) -> dict:
        return {"roi": self.roi, "s": self.level_s, "p": self.p_value,
                "B": int(len(self.statistic_samples)), "clamp_flag": self.clamped}


def bootstrap_p_value(T) -> tuple[float, bool]:
    """Two-sided p from bootstrap draws of T: 2 min(F(0), 1 - F(0-)), clamped to [1/B, 1]."""
    T = np.asarray(T, dtype=float)
    B = len(T)
    if B == 0:
        raise ValueError("no bootstrap statistics")
    p = min(1.0, 2.0 * min(np.count_nonzero(T <= 0), np.count_nonzero(T >= 0)) / B)
    if p < 1.0 / B:
        return 1.0 / B, True
    return p, False


def _roi_means(samples: BootstrapSamples, target: str):
    if samples.roi_a is None:
        raise DataError("grid has no ROI labels")
    names = list(samples.roi_names)
    if target not in names:
        raise DataError(f"unknown ROI {target!r}")
    if len(names) < 2:
        raise DataError("need at least two ROIs")
    return names.index(target), samples.roi_a, samples.roi_b


def _contrast(values: np.ndarray, t: int) -> np.ndarray:
    others = np.delete(values, t, axis=1)
    return values[:, t] - others.max(axis=1)


def test_level(samples: BootstrapSamples, target_roi: str, s: float) -> HypothesisResult:
    """Does the target ROI have the highest level at score ``s``? T = y_target(s) - max_other y_r(s)."""
    t, a_r, b_r = _roi_means(samples, target_roi)
    T = _contrast(a_r * s + b_r, t)
    p, clamped = bootstrap_p_value(T)
    return HypothesisResult(T, p, float(s), target_roi, clamped)


def test_rate(samples: BootstrapSamples, target_roi: str) -> HypothesisResult:
    """Does the target ROI have the largest mean slope? T = a_target - max_other a_r."""
    t, a_r, _ = _roi_means(samples, target_roi)
    T = _contrast(a_r, t)
    p, clamped = bootstrap_p_value(T)
    return HypothesisResult(T, p, None, target_roi, clamped)


# -- files ---------------------------------------------------------------------------

QUANTITIES = ("a", "b", "m", "V", "lambda", "alpha", "beta", "s")


def element_names(quantity: str, dataset: Dataset) -> list[str]:
    if quantity in ("a", "b"):
        return list(dataset.grid.voxel_ids)
    if quantity == "m":
        return ["m_alpha", "m_beta"]
    if quantity == "V":
        return ["V_11", "V_12", "V_21", "V_22"]
    if quantity == "lambda":
        return ["lambda"]
    if quantity in ("alpha", "beta"):
        return list(dataset.subject_ids)
    return [f"{dataset.subject_ids[i]}:{v}" for i, v in zip(dataset.subject, dataset.visit_index)]


def save_bootstrap(samples: BootstrapSamples, dataset: Dataset, directory, level: float = 0.95) -> None:
    """One CSV per quantity (rows = usable replicates), ``ci_summary.csv`` and ``bootstrap.json``."""
    directory = Path(directory)
    for q in QUANTITIES:
        with open(directory / f"{q}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replicate"] + element_names(q, dataset))
            for r, row in zip(samples.replicate, samples.quantity(q)):
                w.writerow([int(r)] + [repr(float(x)) for x in row])
    if samples.n_usable >= MIN_REPLICATES:
        with open(directory / "ci_summary.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["quantity", "element", "lo", "hi", "level"])
            for q in QUANTITIES:
                for name, (lo, hi) in zip(element_names(q, dataset), ci(samples, q, level)):
                    w.writerow([q, name, repr(float(lo)), repr(float(hi)), level])
    else:
        logger.warning("only %d usable replicates; no confidence intervals written", samples.n_usable)
    meta = {"B": samples.B, "seed": samples.seed, "family": samples.family,
            "rho_fixed": samples.rho_fixed, "usable": samples.n_usable,
            "excluded": [{"replicate": r, "reason": why} for r, why in samples.excluded],
            "prng": "Philox(SeedSequence(seed, spawn_key=(replicate,))).integers(0, n, n)",
            "resample_indices": samples.indices.tolist()}
    (directory / "bootstrap.json").write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")


def _read_matrix(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    body = rows[1:]
    reps = np.array([int(r[0]) for r in body], dtype=np.int64)
    vals = np.array([[float(x) for x in r[1:]] for r in body], dtype=float)
    return reps, vals.reshape(len(body), len(rows[0]) - 1)


def load_bootstrap(directory, grid: VoxelGrid) -> BootstrapSamples:
    directory = Path(directory)
    try:
        meta = json.loads((directory / "bootstrap.json").read_text(encoding="utf-8"))
        data = {q: _read_matrix(directory / f"{q}.csv") for q in QUANTITIES}
    except (OSError, ValueError, KeyError, IndexError) as exc:
        raise DataError(f"cannot read bootstrap output in {directory}: {exc}") from exc
    reps = data["a"][0]
    if data["a"][1].shape[1] != grid.K:
        raise DataError("bootstrap slopes do not match the grid")
    n_rep = len(reps)
    return BootstrapSamples(
        B=meta["B"], seed=meta["seed"], family=meta["family"], rho_fixed=meta["rho_fixed"],
        grid=grid, replicate=reps, indices=np.array(meta["resample_indices"], dtype=np.int64),
        a=data["a"][1], b=data["b"][1], m=data["m"][1], V=data["V"][1].reshape(n_rep, 2, 2),
        lam=data["lambda"][1].reshape(n_rep), alpha=data["alpha"][1], beta=data["beta"][1],
        s=data["s"][1], excluded=[(e["replicate"], e["reason"]) for e in meta["excluded"]],
    )


# pytest would otherwise collect these as tests when imported into test modules
test_level.__test__ = False
test_rate.__test__ = False
