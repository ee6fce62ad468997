"""Per-voxel linear mixed model with random intercepts and slopes (ML).

Ages are centered internally so the random-effects optimizer sees roughly
uncorrelated coordinates; estimates are mapped back to raw age at the end.
The fixed effects are profiled out by generalized least squares, leaving a
simplex search over log-Cholesky(Ξ) and log σ.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .data import Dataset
from .spatial import nu_from_v

logger = logging.getLogger(__name__)

LOG2PI = float(np.log(2.0 * np.pi))
PINNED_LOG = -30.0  # log-Cholesky diagonal used when Ξ is pinned at ~0


@dataclass(frozen=True)
class LmeVoxelFit:
    eta: float
    gamma: float
    xi: np.ndarray  # 2x2 in raw-age coordinates, order (slope, intercept)
    sigma2: float
    loglik: float
    ols_loglik: float = float("nan")
    converged: bool = True
    pinned: bool = False  # insufficient longitudinal data; Ξ held near zero


@dataclass
class LmeConfig:
    xatol: float = 1e-7
    fatol: float = 1e-8
    max_evals: int = 4000
    restarts: int = 2


class _Stats:
    """Per-subject sufficient statistics of one voxel (centered ages)."""

    def __init__(self, dataset: Dataset, y: np.ndarray):
        self.t_bar = float(dataset.ages.mean())
        tc = dataset.ages - self.t_bar
        Z = np.column_stack([tc, np.ones_like(tc)])
        n = dataset.n
        sub = dataset.subject
        self.v = np.bincount(sub, minlength=n).astype(float)
        self.ZtZ = np.zeros((n, 2, 2))
        np.add.at(self.ZtZ, sub, Z[:, :, None] * Z[:, None, :])
        self.Zty = np.zeros((n, 2))
        np.add.at(self.Zty, sub, Z * y[:, None])
        self.yty = np.bincount(sub, weights=y * y, minlength=n)
        self.N = len(y)
        self.Z, self.y = Z, y


def _profile(st: _Stats, U: np.ndarray, s2: float):
    """(loglik, beta) at random-effects factor U (Ξ_c = U^T U) and residual variance s2."""
    # Σ_i = s2 I + Z U^T U Z^T;  M_i = s2 I + U Z^T Z U^T
    G = np.einsum("ij,njk,lk->nil", U, st.ZtZ, U)
    M = G + s2 * np.eye(2)
    det = M[:, 0, 0] * M[:, 1, 1] - M[:, 0, 1] * M[:, 1, 0]
    if not np.all(det > 0):
        return -np.inf, None
    Minv = np.empty_like(M)
    Minv[:, 0, 0], Minv[:, 1, 1] = M[:, 1, 1], M[:, 0, 0]
    Minv[:, 0, 1], Minv[:, 1, 0] = -M[:, 0, 1], -M[:, 1, 0]
    Minv /= det[:, None, None]
    UZtZ = np.einsum("ij,njk->nik", U, st.ZtZ)  # U Z^T Z
    UZty = st.Zty @ U.T  # U Z^T y
    # X^T Σ^-1 X and X^T Σ^-1 y, X = Z, times s2
    XSX = (st.ZtZ - np.einsum("nji,njk,nkl->nil", UZtZ, Minv, UZtZ)).sum(axis=0)
    XSy = (st.Zty - np.einsum("nji,njk,nk->ni", UZtZ, Minv, UZty)).sum(axis=0)
    ySy = float((st.yty - np.einsum("ni,nij,nj->n", UZty, Minv, UZty)).sum())
    try:
        beta = np.linalg.solve(XSX, XSy)
    except np.linalg.LinAlgError:
        return -np.inf, None
    quad = (ySy - beta @ XSy) / s2
    logdet = float(((st.v - 2.0) * np.log(s2) + np.log(det)).sum())
    return -0.5 * (st.N * LOG2PI + logdet + quad), beta


def _unpack(x):
    U = np.array([[np.exp(x[0]), x[1]], [0.0, np.exp(x[2])]])
    return U, float(np.exp(2.0 * x[3]))


def _ols(st: _Stats):
    beta, *_ = np.linalg.lstsq(st.Z, st.y, rcond=None)
    r = st.y - st.Z @ beta
    s2 = max(float(r @ r) / st.N, 1e-300)
    return beta, s2, -0.5 * st.N * (LOG2PI + np.log(s2) + 1.0)


def _start(st: _Stats, dataset: Dataset, s2: float) -> np.ndarray:
    """Ξ from the spread of per-subject least-squares lines, halved to leave room for noise;
    σ² pooled from the within-subject residuals when any subject has three or more visits."""
    coefs = []
    rss, dof = 0.0, 0
    for i in np.flatnonzero(st.v >= 2):
        r = dataset.rows_of(int(i))
        Zi = st.Z[r]
        if np.ptp(Zi[:, 0]) > 0:
            c = np.linalg.lstsq(Zi, st.y[r], rcond=None)[0]
            coefs.append(c)
            e = st.y[r] - Zi @ c
            rss += float(e @ e)
            dof += len(e) - 2
    if dof > 0 and rss > 0:
        s2 = rss / dof
    var_t = float(st.Z[:, 0].var()) or 1.0
    floor = np.diag([1e-2 * s2 / var_t, 1e-2 * s2])
    if len(coefs) >= 2:
        C = np.cov(np.array(coefs).T, bias=True)
        X = 0.5 * C + floor
    else:
        X = floor
    return np.concatenate([nu_from_v(0.5 * (X + X.T)), [0.5 * np.log(s2)]])


def _raw(beta_c, Xi_c, t_bar):
    """Centered-age (slope, intercept) estimates to raw age."""
    A = np.array([[1.0, 0.0], [-t_bar, 1.0]])
    return float(beta_c[0]), float(beta_c[1] - beta_c[0] * t_bar), A @ Xi_c @ A.T


def fit_lme_voxel(dataset: Dataset, k: int, config: LmeConfig | None = None) -> LmeVoxelFit:
    cfg = config or LmeConfig()
    y = np.asarray(dataset.Y[:, k], dtype=float)
    st = _Stats(dataset, y)
    beta_ols, s2_ols, ll_ols = _ols(st)
    pinned_x = np.array([PINNED_LOG, 0.0, PINNED_LOG, 0.5 * np.log(s2_ols)])

    if np.count_nonzero(st.v >= 2) < 2:
        logger.warning("voxel %d: fewer than 2 subjects with repeat visits; random effects pinned", k)
        U, s2 = _unpack(pinned_x)
        ll, beta = _profile(st, U, s2)
        eta, gamma, xi = _raw(beta, U.T @ U, st.t_bar)
        return LmeVoxelFit(eta, gamma, xi, s2, ll, ll_ols, True, True)

    def neg(x):
        if not np.all(np.isfinite(x)) or np.abs(x).max() > 60:
            return np.inf
        ll, _ = _profile(st, *_unpack(x))
        return -ll if np.isfinite(ll) else np.inf

    x = _start(st, dataset, s2_ols)
    converged = False
    for _ in range(1 + cfg.restarts):
        res = optimize.minimize(neg, x, method="Nelder-Mead",
                                options={"xatol": cfg.xatol, "fatol": cfg.fatol,
                                         "maxfev": cfg.max_evals, "adaptive": True})
        moved = neg(x) - res.fun
        x = res.x
        converged = bool(res.success)
        if converged and moved < cfg.fatol:
            break
    # the OLS submodel sits on the boundary the log-Cholesky map cannot reach exactly
    if neg(pinned_x) < neg(x):
        x = pinned_x
    U, s2 = _unpack(x)
    ll, beta = _profile(st, U, s2)
    eta, gamma, xi = _raw(beta, U.T @ U, st.t_bar)
    return LmeVoxelFit(eta, gamma, xi, s2, ll, ll_ols, converged, False)


def fit_lme(dataset: Dataset, config: LmeConfig | None = None, n_jobs: int = 1) -> list[LmeVoxelFit]:
    if n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            return list(ex.map(lambda k: fit_lme_voxel(dataset, k, config), range(dataset.K)))
    return [fit_lme_voxel(dataset, k, config) for k in range(dataset.K)]


def lme_model_summary(fits) -> tuple[float, float]:
    """(total loglik, AIC) with 6 parameters per voxel and voxels independent."""
    total = float(sum(f.loglik for f in fits))
    return total, 2.0 * 6 * len(fits) - 2.0 * total


def lme_marginal_loglik(dataset: Dataset, k: int, eta, gamma, xi, sigma2) -> float:
    """Marginal log-likelihood of voxel ``k`` at given raw-age parameters."""
    y = dataset.Y[:, k]
    out = 0.0
    for i in range(dataset.n):
        r = dataset.rows_of(i)
        Z = np.column_stack([dataset.ages[r], np.ones(r.stop - r.start)])
        S = sigma2 * np.eye(len(Z)) + Z @ np.asarray(xi) @ Z.T
        e = y[r] - Z @ [eta, gamma]
        _, ld = np.linalg.slogdet(S)
        out -= 0.5 * (len(Z) * LOG2PI + ld + e @ np.linalg.solve(S, e))
    return float(out)


def write_lme_csv(path, dataset: Dataset, fits) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["voxel_id", "eta", "gamma", "xi_11", "xi_12", "xi_22", "sigma2", "loglik", "pinned"])
        for vid, f in zip(dataset.grid.voxel_ids, fits):
            w.writerow([vid, repr(f.eta), repr(f.gamma), repr(float(f.xi[0, 0])),
                        repr(float(f.xi[0, 1])), repr(float(f.xi[1, 1])), repr(f.sigma2),
                        repr(f.loglik), int(f.pinned)])
