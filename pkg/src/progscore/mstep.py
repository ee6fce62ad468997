"""M-step updates: closed forms for a, b, m, V and the stage-1 noise diagonal,
simplex search for the stage-2 noise scale and correlation range."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .data import Dataset
from .errors import DegenerateScoresError, NumericalError
from .estep import Posteriors, q_terms
from .spatial import Correlation, KernelFamily, NoiseCov, build_correlation, nu_from_v

logger = logging.getLogger(__name__)

SIMPLEX_STEP = 0.25
SIMPLEX_XTOL = 1e-4
LAMBDA_FLOOR_REL = 1e-6


def update_traj(dataset: Dataset, post: Posteriors) -> tuple[np.ndarray, np.ndarray]:
    """Joint closed-form slopes and intercepts.

    Written around the score mean, which is algebraically the same ratio as
    (N Σys - Σy Σs) / (N Σ(q'Σq + s²) - (Σs)²) but without the cancellation.
    """
    s = post.s
    if len(s) == 0:
        raise DegenerateScoresError("no visits")
    s_bar = s.mean()
    ds = s - s_bar
    den = float(ds @ ds + post.qsq(dataset).sum())
    if not den > 1e-14 * max(float(s @ s), 1e-300):
        raise DegenerateScoresError(
            "trajectory update denominator is not positive: all scores equal and posterior variance ~0"
        )
    y_bar = dataset.Y.mean(axis=0)
    a = (ds @ (dataset.Y - y_bar)) / den
    b = y_bar - a * s_bar
    return a, b


def update_m(post: Posteriors) -> np.ndarray:
    return post.u_hat.mean(axis=0)


def optimal_v(post: Posteriors, m) -> np.ndarray:
    """V* = (1/n) Σ_i [(u_i - m)(u_i - m)^T + Σ_i], ridged when rank deficient."""
    d = post.u_hat - m
    V = (d.T @ d + post.sigma.sum(axis=0)) / len(d)
    V = 0.5 * (V + V.T)
    tr = float(np.trace(V))
    lo = np.linalg.eigvalsh(V)[0]
    if not lo > 1e-12 * tr:
        ridge = 1e-8 * tr / 2.0 if tr > 0 else 1e-12
        logger.debug("prior covariance update rank deficient; adding ridge %.3g", ridge)
        V = V + ridge * np.eye(2)
    return V


def update_nu(post: Posteriors, m) -> np.ndarray:
    return nu_from_v(optimal_v(post, m))


def update_lambda_diag(dataset: Dataset, post: Posteriors, a, b) -> np.ndarray:
    """Per-voxel noise SD for the independent-noise model, floored at 1e-6 x data SD."""
    E = dataset.Y - np.outer(post.s, a) - b
    mean_qsq = post.qsq(dataset).mean()
    lam = np.sqrt((E * E).mean(axis=0) + np.asarray(a) ** 2 * mean_qsq)
    floor = LAMBDA_FLOOR_REL * np.maximum(dataset.Y.std(axis=0), 1e-12)
    return np.maximum(lam, floor)


@dataclass
class NoiseUpdate:
    lam: float
    corr: Correlation
    improved: bool
    evaluations: int
    objective: float


class _ScaledNoiseQ:
    """Noise part of Q as a function of (lambda, rho) with Λ = lambda Λ_hat."""

    def __init__(self, dataset: Dataset, post: Posteriors, a, b, lambda_hat, family,
                 distances, cutoff_mm=None):
        self.A = q_terms(dataset, a, b, post) / lambda_hat[:, None]
        self.N = dataset.N
        self.K = dataset.K
        self.family = KernelFamily.parse(family)
        self.distances = distances
        self.cutoff_mm = cutoff_mm
        self.const = -self.N * float(np.log(lambda_hat).sum())
        self._cache: dict[float, tuple[Correlation, float]] = {}

    def corr_terms(self, rho) -> tuple[Correlation, float]:
        """(C, ||L^-1 A||_F^2) for a correlation range."""
        key = float(rho) if rho is not None else -1.0
        if key not in self._cache:
            corr = build_correlation(self.distances, self.family, rho, self.cutoff_mm, quiet=True)
            W = corr.half_solve(self.A)
            self._cache[key] = (corr, float(np.einsum("kp,kp->", W, W)))
        return self._cache[key]

    def value(self, lam, rho) -> float:
        corr, ss = self.corr_terms(rho)
        return (self.const - 0.5 * self.N * (2 * self.K * np.log(lam) + corr.logdet)
                - 0.5 * ss / lam**2)

    def best_lambda(self, rho) -> float:
        _, ss = self.corr_terms(rho)
        return float(np.sqrt(ss / (self.N * self.K)))


def update_lambda_fixed_rho(dataset, post, a, b, lambda_hat, corr: Correlation) -> float:
    """Exact maximizer of Q over the noise scale when the correlation is held fixed."""
    A = q_terms(dataset, a, b, post) / np.asarray(lambda_hat)[:, None]
    W = corr.half_solve(A)
    return float(np.sqrt(np.einsum("kp,kp->", W, W) / (dataset.N * dataset.K)))


def initial_rho(dataset, post, a, b, lambda_hat, family, distances, bounds, n_grid=25,
                cutoff_mm=None) -> tuple[float, float]:
    """Grid search on log rho with the scale profiled out; returns (lambda, rho)."""
    f = _ScaledNoiseQ(dataset, post, a, b, np.asarray(lambda_hat), family, distances, cutoff_mm)
    best = None
    for rho in np.exp(np.linspace(np.log(bounds[0]), np.log(bounds[1]), n_grid)):
        try:
            lam = f.best_lambda(rho)
            val = f.value(lam, rho)
        except NumericalError:
            continue
        if best is None or val > best[0]:
            best = (val, lam, float(rho))
    if best is None:
        raise NumericalError(f"no valid correlation range for {KernelFamily.parse(family).name}")
    return best[1], best[2]


def update_lambda_rho(dataset: Dataset, post: Posteriors, a, b, lambda_hat, family,
                      lam0: float, rho0: float, distances, bounds,
                      max_evals: int = 50, cutoff_mm=None) -> NoiseUpdate:
    """Generalized-EM step for (lambda, rho): Nelder-Mead on (log lambda, log rho)
    from the previous values; keeps the previous point unless Q increases."""
    lambda_hat = np.asarray(lambda_hat)
    f = _ScaledNoiseQ(dataset, post, a, b, lambda_hat, family, distances, cutoff_mm)
    lo, hi = np.log(bounds[0]), np.log(bounds[1])

    def neg(x):
        if not lo <= x[1] <= hi:
            return np.inf
        try:
            return -f.value(np.exp(x[0]), np.exp(x[1]))
        except NumericalError:
            return np.inf

    x0 = np.array([np.log(lam0), np.clip(np.log(rho0), lo, hi)])
    f0 = neg(x0)
    step_rho = SIMPLEX_STEP if x0[1] + SIMPLEX_STEP <= hi else -SIMPLEX_STEP
    simplex = np.array([x0, x0 + [SIMPLEX_STEP, 0.0], x0 + [0.0, step_rho]])
    res = optimize.minimize(
        neg, x0, method="Nelder-Mead",
        options={"initial_simplex": simplex, "maxfev": max_evals, "xatol": SIMPLEX_XTOL,
                 "fatol": np.inf},
    )
    improved = bool(np.isfinite(res.fun) and res.fun < f0)
    x = res.x if improved else x0
    if not improved:
        logger.debug("noise update stagnated at lambda=%.4g rho=%.4g", lam0, rho0)
    lam, rho = float(np.exp(x[0])), float(np.exp(x[1]))
    corr, _ = f.corr_terms(rho)
    return NoiseUpdate(lam, corr, improved, int(res.nfev), -float(min(res.fun, f0)))


def scaled_noise(update: NoiseUpdate, lambda_hat) -> NoiseCov:
    return NoiseCov.scaled(update.corr, update.lam, lambda_hat)
