"""Posterior of the subject variables and the EM surrogate Q."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .params import ModelParams
from .spatial import NoiseCov

LOG2PI = float(np.log(2.0 * np.pi))


def inv2(M: np.ndarray) -> np.ndarray:
    """Closed-form inverse of a stack of 2x2 matrices, shape (..., 2, 2)."""
    det = M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    out = np.empty_like(M)
    out[..., 0, 0] = M[..., 1, 1]
    out[..., 1, 1] = M[..., 0, 0]
    out[..., 0, 1] = -M[..., 0, 1]
    out[..., 1, 0] = -M[..., 1, 0]
    return out / det[..., None, None]


def det2(M: np.ndarray) -> np.ndarray:
    return M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]


@dataclass(frozen=True)
class SubjectPosterior:
    u_hat: np.ndarray  # [alpha, beta]
    sigma: np.ndarray  # 2x2
    s: np.ndarray  # per-visit scores


@dataclass(frozen=True, eq=False)
class Posteriors:
    """Posteriors of all subjects, stacked.

    ``g`` holds Sum_j q_ij a^T R^-1 (y_ij - b - a q_ij^T m) per subject, the
    data term around the prior predictive mean; ``resid_quad`` the matching
    per-visit quadratic forms. Both are reused by the marginal likelihood.
    """

    u_hat: np.ndarray  # (n, 2)
    sigma: np.ndarray  # (n, 2, 2)
    s: np.ndarray  # (N,)
    g: np.ndarray  # (n, 2)
    resid_quad: np.ndarray  # (N,)
    aRa: float

    def __len__(self) -> int:
        return len(self.u_hat)

    def subject(self, i: int, rows: slice) -> SubjectPosterior:
        return SubjectPosterior(self.u_hat[i], self.sigma[i], self.s[rows])

    def qsq(self, dataset: Dataset) -> np.ndarray:
        """q_ij^T Sigma_i q_ij per visit."""
        S = self.sigma[dataset.subject]
        q = dataset.Q
        return np.einsum("ri,rij,rj->r", q, S, q)


def _per_subject_sum(subject: np.ndarray, n: int, values: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` (N, ...) into subjects, shape (n, ...)."""
    out = np.zeros((n,) + values.shape[1:])
    np.add.at(out, subject, values)
    return out


def e_step(dataset: Dataset, theta: ModelParams) -> Posteriors:
    """Posterior mean and covariance of u_i for every subject under ``theta``."""
    noise = theta.noise
    a, b, m = theta.a, theta.b, theta.m
    V = theta.V
    Vinv = inv2(V)
    Ra = noise.solve(a)
    aRa = float(a @ Ra)

    q = dataset.Q
    # residuals around the prior predictive mean a q^T m + b
    E = dataset.Y - b - np.outer(q @ m, a)
    WE = noise.whiten(E.T)
    resid_quad = np.einsum("kr,kr->r", WE, WE)
    gv = E @ Ra

    n = dataset.n
    qq = np.einsum("ri,rj->rij", q, q)
    P = aRa * _per_subject_sum(dataset.subject, n, qq) + Vinv
    sigma = inv2(P)
    g = _per_subject_sum(dataset.subject, n, q * gv[:, None])
    u_hat = m + np.einsum("nij,nj->ni", sigma, g)
    s = np.einsum("ri,ri->r", q, u_hat[dataset.subject])
    return Posteriors(u_hat, sigma, s, g, resid_quad, aRa)


def posterior_subject(ages, Y, theta: ModelParams) -> SubjectPosterior:
    """Posterior of one subject's u = [alpha, beta] given its visits (ages, K-rows)."""
    ages = np.atleast_1d(np.asarray(ages, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(len(ages), theta.K)
    Ra = theta.noise.solve(theta.a)
    aRa = float(theta.a @ Ra)
    q = np.column_stack([ages, np.ones(len(ages))])
    Vinv = inv2(theta.V)
    P = aRa * q.T @ q + Vinv
    h = q.T @ ((Y - theta.b) @ Ra) + Vinv @ theta.m
    sigma = inv2(P)
    u = sigma @ h
    return SubjectPosterior(u, sigma, q @ u)


def noise_objective(noise: NoiseCov, EtT: np.ndarray, N: int) -> float:
    """-1/2 N log|R| - 1/2 ||L^-1 Λ^-1 EtT||_F^2: the noise-dependent part of Q.

    ``EtT`` is (K, p): visit residuals as columns plus the sqrt(trace-weight)
    scaled slope column.
    """
    W = noise.whiten(EtT)
    return -0.5 * N * noise.logdet() - 0.5 * float(np.einsum("kp,kp->", W, W))


def q_terms(dataset: Dataset, a, b, post: Posteriors):
    """Residual columns and the summed q^T Sigma' q weight used by Q."""
    E = dataset.Y - np.outer(post.s, a) - b
    tau = float(post.qsq(dataset).sum())
    return np.column_stack([E.T, np.sqrt(tau) * np.asarray(a)])


def q_function(dataset: Dataset, theta: ModelParams, post: Posteriors) -> float:
    """Q(theta, theta') with ``post`` computed under theta'; theta-free constants dropped."""
    n = dataset.n
    V = theta.V
    Vinv = inv2(V)
    A = q_terms(dataset, theta.a, theta.b, post)
    out = noise_objective(theta.noise, A, dataset.N)
    d = post.u_hat - theta.m
    out -= 0.5 * n * float(np.log(det2(V)))
    out -= 0.5 * float(np.einsum("ni,ij,nj->", d, Vinv, d))
    out -= 0.5 * float(np.einsum("ij,nji->", Vinv, post.sigma))
    return out


def marginal_loglik_from(dataset: Dataset, theta: ModelParams, post: Posteriors) -> float:
    """Incomplete-data log-likelihood from an E-step computed at the same theta.

    Uses the Woodbury form around the prior predictive mean, which equals
    1/2 Sum_i (log|2pi Sigma_i| - log|2pi V| - v_i log|2pi R|)
    - 1/2 Sum_ij (y-b)^T R^-1 (y-b) - 1/2 Sum_i m^T V^-1 m + 1/2 Sum_i u_i^T Sigma_i^-1 u_i
    but avoids cancellation between large terms.
    """
    N, K = dataset.N, dataset.K
    logdetV = float(np.log(det2(theta.V)))
    logdetS = np.log(det2(post.sigma))
    out = 0.5 * float((logdetS - logdetV).sum())
    out -= 0.5 * N * (K * LOG2PI + theta.noise.logdet())
    out -= 0.5 * float(post.resid_quad.sum())
    out += 0.5 * float(np.einsum("ni,nij,nj->", post.g, post.sigma, post.g))
    return out


def marginal_loglik(dataset: Dataset, theta: ModelParams) -> float:
    return marginal_loglik_from(dataset, theta, e_step(dataset, theta))
