"""Spatial correlation kernels, log-Cholesky prior covariance, noise covariance R = Λ C Λ."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import NumericalError

logger = logging.getLogger(__name__)

JITTER = 1e-10


class KernelFamily(enum.Enum):
    Identity = "identity"
    Exponential = "exponential"
    Gaussian = "gaussian"
    RationalQuadratic = "rational_quadratic"
    Spherical = "spherical"

    @classmethod
    def parse(cls, name) -> "KernelFamily":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_").replace(" ", "_")
        aliases = {"rationalquadratic": "rational_quadratic", "rq": "rational_quadratic",
                   "exp": "exponential", "none": "identity", "independent": "identity"}
        key = aliases.get(key, key)
        for fam in cls:
            if fam.value == key:
                return fam
        raise ValueError(f"unknown kernel family {name!r}")


SPATIAL_FAMILIES = (
    KernelFamily.Exponential,
    KernelFamily.Gaussian,
    KernelFamily.RationalQuadratic,
    KernelFamily.Spherical,
)


def correlation(family: KernelFamily, d, rho: float):
    """Correlation at distance ``d`` (mm) for range ``rho`` (mm). Vectorized over ``d``."""
    family = KernelFamily.parse(family)
    d = np.asarray(d, dtype=float)
    if family is KernelFamily.Identity:
        return np.where(d == 0.0, 1.0, 0.0) if d.ndim else float(d == 0.0)
    if not rho > 0 or not np.isfinite(rho):
        raise ValueError(f"correlation range must be positive, got rho={rho}")
    h = d / rho
    if family is KernelFamily.Exponential:
        c = np.exp(-h)
    elif family is KernelFamily.Gaussian:
        c = np.exp(-h * h)
    elif family is KernelFamily.RationalQuadratic:
        c = 1.0 / (1.0 + h * h)
    else:
        c = np.where(h < 1.0, 1.0 - 1.5 * h + 0.5 * h**3, 0.0)
    return c if c.ndim else float(c)


def rho_bounds(distances: np.ndarray) -> tuple[float, float]:
    """Search range for the correlation length: [0.1 x min nonzero, 10 x max] distance."""
    nz = distances[distances > 0]
    if nz.size == 0:
        return 0.1, 10.0
    return 0.1 * float(nz.min()), 10.0 * float(nz.max())


@dataclass(frozen=True, eq=False)
class Correlation:
    """Correlation matrix C with its lower Cholesky factor. Identity is kept implicit."""

    family: KernelFamily
    rho: float | None
    K: int
    matrix: np.ndarray | None  # None for identity
    chol: np.ndarray | None
    logdet: float
    jittered: bool = False

    @property
    def is_identity(self) -> bool:
        return self.matrix is None

    def dense(self) -> np.ndarray:
        return np.eye(self.K) if self.matrix is None else self.matrix

    def solve(self, B: np.ndarray) -> np.ndarray:
        if self.chol is None:
            return np.array(B, dtype=float)
        return linalg.cho_solve((self.chol, True), B, check_finite=False)

    def half_solve(self, B: np.ndarray) -> np.ndarray:
        """L^{-1} B where C = L L^T, so that ||L^{-1} b||^2 = b^T C^{-1} b."""
        if self.chol is None:
            return np.array(B, dtype=float)
        return linalg.solve_triangular(self.chol, B, lower=True, check_finite=False)


def build_correlation(distances: np.ndarray, family, rho: float | None = None,
                      cutoff_mm: float | None = None, quiet: bool = False) -> Correlation:
    """Correlation matrix for a distance matrix, factorized.

    ``cutoff_mm`` zeroes entries beyond the cutoff for the spherical kernel
    only, and only when the cutoff is at least ``rho`` (where it is exact).
    """
    family = KernelFamily.parse(family)
    distances = np.asarray(distances, dtype=float)
    K = distances.shape[0]
    if family is KernelFamily.Identity:
        return Correlation(family, None, K, None, None, 0.0)
    if rho is None or not rho > 0:
        raise ValueError(f"correlation range must be positive, got rho={rho}")
    C = correlation(family, distances, rho)
    np.fill_diagonal(C, 1.0)
    if cutoff_mm is not None:
        if family is KernelFamily.Spherical and cutoff_mm >= rho:
            C[distances > cutoff_mm] = 0.0
        elif family is not KernelFamily.Spherical:
            logger.debug("correlation cutoff ignored for %s kernel", family.name)
    jittered = False
    try:
        L = linalg.cholesky(C, lower=True, check_finite=False)
    except linalg.LinAlgError:
        jittered = True
        (logger.debug if quiet else logger.warning)(
            "Cholesky of %s C(rho=%.4g) failed; retrying with diagonal jitter",
            family.name, rho)
        try:
            L = linalg.cholesky(C + JITTER * np.eye(K), lower=True, check_finite=False)
        except linalg.LinAlgError:
            raise NumericalError(
                f"correlation matrix not positive definite: family={family.name}, rho={rho:.6g} mm, "
                f"K={K}, min nonzero distance={distances[distances > 0].min(initial=np.inf):.4g} mm"
            ) from None
    logdet = 2.0 * float(np.log(np.diag(L)).sum())
    C.setflags(write=False)
    return Correlation(family, float(rho), K, C, L, logdet, jittered)


# -- prior covariance V(nu) ----------------------------------------------------------


def v_from_nu(nu) -> np.ndarray:
    """V = U^T U with U = [[exp(nu1), nu2], [0, exp(nu3)]]."""
    nu = np.asarray(nu, dtype=float)
    U = np.array([[np.exp(nu[0]), nu[1]], [0.0, np.exp(nu[2])]])
    return U.T @ U


def nu_from_v(V) -> np.ndarray:
    V = np.asarray(V, dtype=float)
    if V.shape != (2, 2) or not np.allclose(V, V.T, rtol=1e-12, atol=0.0):
        raise ValueError("V must be a symmetric 2x2 matrix")
    if not (V[0, 0] > 0 and np.linalg.det(V) > 0):
        raise ValueError("V must be positive definite")
    u11 = np.sqrt(V[0, 0])
    u12 = V[0, 1] / u11
    u22 = np.sqrt(V[1, 1] - u12 * u12)
    return np.array([np.log(u11), u12, np.log(u22)])


# -- noise covariance ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseCov:
    """R = Λ C Λ with Λ = diag(scale).

    Stage 1 keeps a free positive diagonal (``lam`` is None). Stage 2 uses
    ``scale = lam * lambda_hat`` with ``lambda_hat`` frozen from stage 1.
    """

    corr: Correlation
    scale: np.ndarray
    lam: float | None = None
    lambda_hat: np.ndarray | None = None

    @classmethod
    def independent(cls, lambda_diag) -> "NoiseCov":
        lambda_diag = np.asarray(lambda_diag, dtype=float)
        if (lambda_diag <= 0).any() or not np.isfinite(lambda_diag).all():
            raise ValueError("noise scales must be positive and finite")
        return cls(build_correlation(np.zeros((len(lambda_diag),) * 2), KernelFamily.Identity),
                   lambda_diag)

    @classmethod
    def scaled(cls, corr: Correlation, lam: float, lambda_hat) -> "NoiseCov":
        lambda_hat = np.asarray(lambda_hat, dtype=float)
        if not lam > 0:
            raise ValueError(f"noise scale lambda must be positive, got {lam}")
        return cls(corr, lam * lambda_hat, float(lam), lambda_hat)

    @property
    def K(self) -> int:
        return len(self.scale)

    @property
    def family(self) -> KernelFamily:
        return self.corr.family

    @property
    def rho(self) -> float | None:
        return self.corr.rho

    def solve(self, B) -> np.ndarray:
        """R^{-1} B without forming R^{-1}."""
        B = np.asarray(B, dtype=float)
        s = self.scale if B.ndim == 1 else self.scale[:, None]
        return self.corr.solve(B / s) / s

    def whiten(self, B) -> np.ndarray:
        """L^{-1} Λ^{-1} B, so column norms squared are the R^{-1} quadratic forms."""
        B = np.asarray(B, dtype=float)
        s = self.scale if B.ndim == 1 else self.scale[:, None]
        return self.corr.half_solve(B / s)

    def logdet(self) -> float:
        return 2.0 * float(np.log(self.scale).sum()) + self.corr.logdet

    def dense(self) -> np.ndarray:
        return self.scale[:, None] * self.corr.dense() * self.scale[None, :]
