"""Model parameter container."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .spatial import NoiseCov, v_from_nu


@dataclass(frozen=True, eq=False)
class ModelParams:
    """theta = {a, b, m, nu, noise}.

    ``a`` and ``b`` are the per-voxel trajectory slopes and intercepts,
    ``m`` and ``nu`` the mean and log-Cholesky covariance parameters of the
    subject variables u = [alpha, beta].
    """

    a: np.ndarray
    b: np.ndarray
    m: np.ndarray
    nu: np.ndarray
    noise: NoiseCov

    def __post_init__(self):
        for name in ("a", "b", "m", "nu"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.a.shape == self.b.shape == (self.noise.K,)):
            raise ValueError("a, b and noise covariance must share K")
        if self.m.shape != (2,) or self.nu.shape != (3,):
            raise ValueError("m must have 2 and nu 3 entries")

    @property
    def K(self) -> int:
        return len(self.a)

    @property
    def V(self) -> np.ndarray:
        return v_from_nu(self.nu)

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)

    def is_finite(self) -> bool:
        return all(np.isfinite(x).all() for x in (self.a, self.b, self.m, self.nu, self.noise.scale))
