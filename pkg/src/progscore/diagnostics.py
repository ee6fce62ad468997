"""Residual semivariogram, kernel-family ranking by semivariogram fit, and
Bland-Altman agreement of two score sets."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .data import DataError, Dataset, VoxelGrid
from .em import FittedModel
from .spatial import SPATIAL_FAMILIES, KernelFamily, correlation

logger = logging.getLogger(__name__)

FULL_PAIR_LIMIT = 4000  # voxels; above this, pairs are sampled
MAX_PAIRS = 1_000_000


@dataclass(frozen=True, eq=False)
class Semivariogram:
    bin_centers: np.ndarray
    gamma_hat: np.ndarray  # NaN where count == 0
    counts: np.ndarray
    mean_distance: np.ndarray  # mean pair distance per bin, NaN where empty
    # distinct pair distances with multiplicity and bin, so a model can be binned like the data
    lags: np.ndarray | None = None
    lag_counts: np.ndarray | None = None
    lag_bin: np.ndarray | None = None

    @property
    def nonempty(self) -> np.ndarray:
        return self.counts > 0


def stage1_residuals(dataset: Dataset, model: FittedModel) -> np.ndarray:
    """(y - a s - b) / λ̂_k per visit and voxel."""
    th = model.theta
    if len(model.scores) != dataset.N:
        raise DataError("model and dataset have different visit counts")
    R = dataset.Y - np.outer(model.scores, th.a) - th.b
    return R / model.lambda_hat


def _bins(n_bins: int, max_distance: float):
    if n_bins < 1 or not max_distance > 0:
        raise ValueError("need n_bins >= 1 and max_distance > 0")
    edges = np.linspace(0.0, max_distance, n_bins + 1)
    return edges, 0.5 * (edges[:-1] + edges[1:])


def empirical_semivariogram(residuals, grid: VoxelGrid, n_bins: int = 30,
                            max_distance_mm: float = 100.0, max_pairs: int = MAX_PAIRS,
                            seed: int = 0) -> Semivariogram:
    """Matheron estimator over voxel pairs, averaged over visits.

    Every unordered pair counts once per bin. Pairs farther apart than
    ``max_distance_mm`` are ignored; a pair exactly at the limit falls in the
    last bin.
    """
    Rz = np.atleast_2d(np.asarray(residuals, dtype=float))
    K = grid.K
    if Rz.shape[1] != K:
        raise DataError(f"residual width {Rz.shape[1]} != grid K={K}")
    edges, centers = _bins(n_bins, max_distance_mm)
    if K <= FULL_PAIR_LIMIT:
        iu, ju = np.triu_indices(K, 1)
        d = grid.distances[iu, ju]
        G = Rz.T @ Rz / len(Rz)
        sq = G[iu, iu] + G[ju, ju] - 2.0 * G[iu, ju]
    else:
        rng = np.random.Generator(np.random.Philox(seed))
        total = K * (K - 1) // 2
        m = min(max_pairs, total)
        iu = rng.integers(0, K, size=m)
        ju = rng.integers(0, K - 1, size=m)
        ju = ju + (ju >= iu)
        pos = grid.positions
        d = np.linalg.norm(pos[iu] - pos[ju], axis=1)
        diff = Rz[:, iu] - Rz[:, ju]
        sq = (diff * diff).mean(axis=0)
    keep = d <= max_distance_mm
    d, sq = d[keep], sq[keep]
    idx = np.minimum(np.searchsorted(edges, d, side="right") - 1, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sums = np.bincount(idx, weights=sq, minlength=n_bins)
    dsum = np.bincount(idx, weights=d, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(counts > 0, 0.5 * sums / counts, np.nan)
        mean_d = np.where(counts > 0, dsum / counts, np.nan)
    # rounding can push a Gram-based value a hair below zero
    gamma = np.where(counts > 0, np.maximum(gamma, 0.0), np.nan)
    lags, inv, lag_counts = np.unique(np.round(d, 9), return_inverse=True, return_counts=True)
    lag_bin = np.zeros(len(lags), dtype=np.int64)
    lag_bin[inv] = idx
    return Semivariogram(centers, gamma, counts, mean_d, lags, lag_counts, lag_bin)


@dataclass(frozen=True)
class VariogramFit:
    family: KernelFamily
    rho: float
    sill: float
    sse: float


def model_semivariogram(sv: Semivariogram, family, rho: float) -> np.ndarray:
    """Unit-sill model 1 - C(h; rho) binned like ``sv``: the pair-weighted bin
    average when pair distances are known, else evaluated at the bin centers."""
    if sv.lags is None:
        return 1.0 - correlation(family, sv.bin_centers, rho)
    f = 1.0 - correlation(family, sv.lags, rho)
    n = len(sv.counts)
    tot = np.bincount(sv.lag_bin, weights=sv.lag_counts * f, minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(sv.counts > 0, tot / sv.counts, np.nan)


def fit_semivariogram(sv: Semivariogram, families=SPATIAL_FAMILIES,
                      n_grid: int = 200) -> list[VariogramFit]:
    """Least-squares sill * (1 - C(h; rho)) per family, best (lowest SSE) first.

    For fixed rho the sill has a closed form, so only rho is searched: a log
    grid over [0.1 x smallest, 10 x largest] lag, then a bounded refinement.
    """
    ok = sv.nonempty
    if np.count_nonzero(ok) < 5:
        raise DataError("semivariogram fit needs at least 5 nonempty bins")
    h = sv.lags if sv.lags is not None else sv.bin_centers[ok]
    g = sv.gamma_hat[ok]
    pos = h[h > 0]
    lo, hi = 0.1 * pos.min(), 10.0 * h.max()

    out = []
    for fam in families:
        fam = KernelFamily.parse(fam)

        def sse_at(log_rho):
            f = model_semivariogram(sv, fam, np.exp(log_rho))[ok]
            ff = float(f @ f)
            sill = float(f @ g) / ff if ff > 0 else 0.0
            r = g - sill * f
            return float(r @ r), sill

        try:
            grid = np.linspace(np.log(lo), np.log(hi), n_grid)
            vals = np.array([sse_at(x)[0] for x in grid])
            j = int(np.argmin(vals))
            a, b = grid[max(j - 1, 0)], grid[min(j + 1, n_grid - 1)]
            res = optimize.minimize_scalar(lambda x: sse_at(x)[0], bounds=(a, b), method="bounded",
                                           options={"xatol": 1e-10})
            x = res.x if res.fun <= vals[j] else grid[j]
            sse, sill = sse_at(x)
        except (ValueError, FloatingPointError) as exc:
            logger.warning("semivariogram fit failed for %s: %s", fam.name, exc)
            continue
        if not np.isfinite(sse):
            logger.warning("semivariogram fit failed for %s", fam.name)
            continue
        out.append(VariogramFit(fam, float(np.exp(x)), sill, sse))
    out.sort(key=lambda f: f.sse)
    return out


def select_family(dataset: Dataset, stage1: FittedModel, n_bins: int = 30,
                  max_distance_mm: float = 100.0) -> list[VariogramFit]:
    sv = empirical_semivariogram(stage1_residuals(dataset, stage1), dataset.grid, n_bins,
                                 max_distance_mm)
    return fit_semivariogram(sv)


@dataclass(frozen=True, eq=False)
class BlandAltman:
    mean_diff: float
    limits: tuple[float, float]
    means: np.ndarray
    diffs: np.ndarray  # a - b


def bland_altman(ps_a, ps_b) -> BlandAltman:
    a = np.ravel(np.asarray(ps_a, dtype=float))
    b = np.ravel(np.asarray(ps_b, dtype=float))
    if a.shape != b.shape:
        raise DataError(f"score sets differ in length: {len(a)} vs {len(b)}")
    if len(a) == 0:
        raise DataError("no scores")
    diff = a - b
    md = float(diff.mean())
    sd = float(diff.std(ddof=1)) if len(diff) > 1 else 0.0
    return BlandAltman(md, (md - 1.96 * sd, md + 1.96 * sd), 0.5 * (a + b), diff)


def write_semivariogram_csv(path, sv: Semivariogram) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_center", "gamma_hat", "count", "mean_distance"])
        for c, g, n, md in zip(sv.bin_centers, sv.gamma_hat, sv.counts, sv.mean_distance):
            w.writerow([repr(float(c)), "" if n == 0 else repr(float(g)), int(n),
                        "" if n == 0 else repr(float(md))])


def write_bland_altman(csv_path, json_path, ba: BlandAltman, visit_ids) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["visit_id", "mean", "diff"])
        for v, m, d in zip(visit_ids, ba.means, ba.diffs):
            w.writerow([v, repr(float(m)), repr(float(d))])
    summary = {"mean_diff": ba.mean_diff, "lower": ba.limits[0], "upper": ba.limits[1],
               "n": int(len(ba.diffs)), "convention": "a - b"}
    with open(json_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(summary, indent=1) + "\n")
