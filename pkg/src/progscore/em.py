"""Two-stage EM fit, score standardization, likelihood/AIC and prediction."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, DataError, VoxelGrid
from .errors import NumericalError, StandardizationError
from .estep import Posteriors, SubjectPosterior, e_step, marginal_loglik_from, posterior_subject
from .mstep import (
    initial_rho,
    update_lambda_diag,
    update_lambda_fixed_rho,
    update_lambda_rho,
    update_m,
    update_nu,
    update_traj,
)
from .params import ModelParams
from .spatial import (
    SPATIAL_FAMILIES,
    KernelFamily,
    NoiseCov,
    build_correlation,
    nu_from_v,
    rho_bounds,
)

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
INDEPENDENT = "IndependentNoise"
CORRELATED = "CorrelatedNoise"
MONOTONE_TOL = 1e-8


@dataclass
class FitConfig:
    """Options for :func:`fit`.

    ``kernel`` is a family name or ``"auto"`` (try ``candidates`` and keep the
    highest likelihood). ``stages=1`` stops after the independent-noise fit.
    ``fixed_rho`` freezes the correlation range (bootstrap replicates).
    """

    kernel: str = "auto"
    candidates: tuple[str, ...] = tuple(f.value for f in SPATIAL_FAMILIES)
    stages: int = 2
    tol: float = 1e-6
    max_iter_stage1: int = 100
    max_iter_stage2: int = 30
    simplex_max_evals: int = 50
    fixed_rho: float | None = None
    correlation_cutoff_mm: float | None = None
    rho_grid: int = 25


@dataclass
class StageResult:
    theta: ModelParams
    post: Posteriors
    loglik: float
    trace: list[float]
    iterations: int
    converged: bool
    monotone_violations: int = 0
    stagnated_steps: int = 0


@dataclass(eq=False)
class FittedModel:
    theta: ModelParams  # standardized
    posteriors: Posteriors  # standardized
    w: float
    z: float
    sign_flipped: bool
    stage: str
    loglik: float
    aic: float
    iterations: int
    converged: bool
    grid: VoxelGrid
    subject_ids: tuple[str, ...]
    subject: np.ndarray
    visit_index: np.ndarray
    ages: np.ndarray
    iteration_log: list[dict] = field(default_factory=list)
    stage1_loglik: float | None = None
    stage1_aic: float | None = None
    candidate_logliks: dict[str, float] = field(default_factory=dict)
    informative: bool = True
    monotone_violations: int = 0

    @property
    def family(self) -> KernelFamily:
        return self.theta.noise.family

    @property
    def rho(self) -> float | None:
        return self.theta.noise.rho

    @property
    def scores(self) -> np.ndarray:
        return self.posteriors.s

    @property
    def lambda_hat(self) -> np.ndarray:
        noise = self.theta.noise
        return noise.scale if noise.lambda_hat is None else noise.lambda_hat

    def subject_posterior(self, i: int) -> SubjectPosterior:
        rows = np.flatnonzero(self.subject == i)
        return SubjectPosterior(self.posteriors.u_hat[i], self.posteriors.sigma[i],
                                self.posteriors.s[rows])


# -- likelihood / AIC ---------------------------------------------------------------


def marginal_loglik(dataset: Dataset, theta: ModelParams) -> float:
    """log f(y; theta) with the subject variables integrated out."""
    return marginal_loglik_from(dataset, theta, e_step(dataset, theta))


def n_params(K: int, stage: str) -> int:
    """m (2) + nu (3) + a (K) + b (K) + noise (K scales in stage 1, lambda and rho in stage 2)."""
    return 2 + 3 + 2 * K + (K if stage == INDEPENDENT else 2)


def aic_value(loglik: float, K: int, stage: str) -> float:
    return 2.0 * n_params(K, stage) - 2.0 * loglik


def aic(fitted: FittedModel, dataset: Dataset | None = None) -> float:
    return aic_value(fitted.loglik, fitted.theta.K, fitted.stage)


# -- standardization ----------------------------------------------------------------


def reparameterize(theta: ModelParams, w: float, z: float) -> ModelParams:
    """Equivalent model under s -> w s + z."""
    if w == 0:
        raise ValueError("w must be nonzero")
    return theta.with_(
        a=theta.a / w,
        b=theta.b - (z / w) * theta.a,
        m=w * theta.m + np.array([0.0, z]),
        nu=nu_from_v(w * w * theta.V),
    )


def reparameterize_posteriors(post: Posteriors, w: float, z: float) -> Posteriors:
    return Posteriors(
        u_hat=w * post.u_hat + np.array([0.0, z]),
        sigma=w * w * post.sigma,
        s=w * post.s + z,
        g=post.g / w,
        resid_quad=post.resid_quad,
        aRa=post.aRa / (w * w),
    )


def standardization_constants(post: Posteriors, dataset: Dataset, theta: ModelParams):
    """(w, z, flipped): baseline scores to mean 0 / SD 1, and mean slope >= 0."""
    s0 = post.s[dataset.baseline_rows]
    mu = float(s0.mean())
    sd = float(np.sqrt(np.mean((s0 - mu) ** 2)))
    if not sd > 0:
        raise StandardizationError("baseline progression scores have zero spread")
    w = 1.0 / sd
    flipped = bool(np.mean(theta.a) < 0)
    if flipped:
        w = -w
    return w, -w * mu, flipped


def standardize(theta: ModelParams, post: Posteriors, dataset: Dataset):
    """Returns (theta*, posteriors*, w, z, flipped)."""
    w, z, flipped = standardization_constants(post, dataset, theta)
    return reparameterize(theta, w, z), reparameterize_posteriors(post, w, z), w, z, flipped


# -- EM -----------------------------------------------------------------------------


def initial_params(dataset: Dataset) -> ModelParams:
    """Deterministic start for the independent-noise fit.

    Scores start as standardized age; slopes/intercepts by per-voxel least
    squares and noise SDs from their residuals. The prior on u is taken from
    per-subject lines fitted to projected visit scores, so it is not
    collapsed to a point.
    """
    t = dataset.ages
    mu_t, sd_t = float(t.mean()), float(t.std())
    if not sd_t > 0:
        raise DataError("all visit ages are identical; progression scores are unidentified")
    s0 = (t - mu_t) / sd_t
    Y = dataset.Y
    y_bar = Y.mean(axis=0)
    a = (s0 @ (Y - y_bar)) / (s0 @ s0)
    b = y_bar.copy()
    resid = Y - np.outer(s0, a) - b
    lam = np.maximum(resid.std(axis=0), 1e-6 * np.maximum(Y.std(axis=0), 1e-12))

    # per-visit score by weighted projection onto the slope direction
    wa = a / lam**2
    denom = float(a @ wa)
    if denom > 0:
        s_proj = (Y - b) @ wa / denom
    else:
        s_proj = s0
    u = np.empty((dataset.n, 2))
    alphas = []
    for i in range(dataset.n):
        r = dataset.rows_of(i)
        ti, si = t[r], s_proj[r]
        if len(ti) >= 2 and np.ptp(ti) > 0:
            alpha = float(np.polyfit(ti, si, 1)[0])
            alphas.append(alpha)
        else:
            alpha = np.nan
        u[i, 0] = alpha
    alpha_fill = float(np.median(alphas)) if alphas else 1.0 / sd_t
    for i in range(dataset.n):
        r = dataset.rows_of(i)
        if not np.isfinite(u[i, 0]):
            u[i, 0] = alpha_fill
        u[i, 1] = float(np.mean(s_proj[r] - u[i, 0] * t[r]))
    m = u.mean(axis=0)
    d = u - m
    V = d.T @ d / dataset.n
    floor = np.diag([(0.1 / sd_t) ** 2, 0.1 ** 2 * (1 + (mu_t / sd_t) ** 2)])
    V = V + floor
    return ModelParams(a, b, m, nu_from_v(0.5 * (V + V.T)), NoiseCov.independent(lam))


def _iterate(dataset: Dataset, theta: ModelParams, m_step, max_iter: int, tol: float,
             stage: str, log: list[dict]) -> StageResult:
    post = e_step(dataset, theta)
    ll = marginal_loglik_from(dataset, theta, post)
    trace = [ll]
    log.append({"stage": stage, "iteration": 0, "loglik": ll})
    converged = False
    violations = 0
    stagnated = 0
    it = 0
    for it in range(1, max_iter + 1):
        theta_new, flag = m_step(theta, post)
        stagnated += int(flag)
        post_new = e_step(dataset, theta_new)
        ll_new = marginal_loglik_from(dataset, theta_new, post_new)
        if not np.isfinite(ll_new):
            raise NumericalError(f"non-finite log-likelihood at {stage} iteration {it}")
        if ll_new < ll - MONOTONE_TOL:
            violations += 1
            logger.warning("%s iteration %d: log-likelihood decreased by %.3g", stage, it, ll - ll_new)
        gain = ll_new - ll
        theta, post, ll = theta_new, post_new, ll_new
        trace.append(ll)
        log.append({"stage": stage, "iteration": it, "loglik": ll})
        if gain < tol * abs(ll):
            converged = True
            break
    return StageResult(theta, post, ll, trace, it, converged, violations, stagnated)


def fit_independent(dataset: Dataset, cfg: FitConfig, log: list[dict] | None = None,
                    theta0: ModelParams | None = None) -> StageResult:
    """Stage 1: C = I with a free positive noise SD per voxel."""
    log = [] if log is None else log

    def m_step(theta, post):
        a, b = update_traj(dataset, post)
        m = update_m(post)
        nu = update_nu(post, m)
        lam = update_lambda_diag(dataset, post, a, b)
        return ModelParams(a, b, m, nu, NoiseCov.independent(lam)), False

    theta = initial_params(dataset) if theta0 is None else theta0
    return _iterate(dataset, theta, m_step, cfg.max_iter_stage1, cfg.tol, INDEPENDENT, log)


def fit_correlated(dataset: Dataset, stage1: StageResult, family, cfg: FitConfig,
                   log: list[dict] | None = None) -> StageResult:
    """Stage 2: R = lambda^2 Λ_hat C(rho) Λ_hat, started from the stage-1 a, b, m, V."""
    log = [] if log is None else log
    family = KernelFamily.parse(family)
    th1 = stage1.theta
    lambda_hat = th1.noise.scale.copy()
    distances = dataset.grid.distances
    bounds = rho_bounds(distances)
    cutoff = cfg.correlation_cutoff_mm

    if family is KernelFamily.Identity:
        corr = build_correlation(distances, family)
        lam0 = update_lambda_fixed_rho(dataset, stage1.post, th1.a, th1.b, lambda_hat, corr)
        fixed = True
    elif cfg.fixed_rho is not None:
        corr = build_correlation(distances, family, cfg.fixed_rho, cutoff)
        lam0 = update_lambda_fixed_rho(dataset, stage1.post, th1.a, th1.b, lambda_hat, corr)
        fixed = True
    else:
        lam0, rho0 = initial_rho(dataset, stage1.post, th1.a, th1.b, lambda_hat, family,
                                 distances, bounds, cfg.rho_grid, cutoff)
        corr = build_correlation(distances, family, rho0, cutoff)
        fixed = False
    theta = th1.with_(noise=NoiseCov.scaled(corr, lam0, lambda_hat))

    def m_step(theta, post):
        a, b = update_traj(dataset, post)
        m = update_m(post)
        nu = update_nu(post, m)
        if fixed:
            c = theta.noise.corr
            lam = update_lambda_fixed_rho(dataset, post, a, b, lambda_hat, c)
            return ModelParams(a, b, m, nu, NoiseCov.scaled(c, lam, lambda_hat)), False
        upd = update_lambda_rho(dataset, post, a, b, lambda_hat, family, theta.noise.lam,
                                theta.noise.rho, distances, bounds, cfg.simplex_max_evals, cutoff)
        noise = NoiseCov.scaled(upd.corr, upd.lam, lambda_hat)
        return ModelParams(a, b, m, nu, noise), not upd.improved

    return _iterate(dataset, theta, m_step, cfg.max_iter_stage2, cfg.tol, CORRELATED, log)


def _informative(post: Posteriors, theta: ModelParams) -> bool:
    """False when posteriors barely move from the prior (mean det ratio > 0.9)."""
    V = theta.V
    ratio = np.linalg.det(post.sigma) / np.linalg.det(V)
    return bool(np.mean(ratio) <= 0.9)


def _finish(dataset: Dataset, res: StageResult, stage: str, log, **extra) -> FittedModel:
    theta_s, post_s, w, z, flipped = standardize(res.theta, res.post, dataset)
    return FittedModel(
        theta=theta_s, posteriors=post_s, w=w, z=z, sign_flipped=flipped, stage=stage,
        loglik=res.loglik, aic=aic_value(res.loglik, dataset.K, stage),
        iterations=res.iterations, converged=res.converged, grid=dataset.grid,
        subject_ids=dataset.subject_ids, subject=dataset.subject,
        visit_index=dataset.visit_index, ages=dataset.ages, iteration_log=log,
        informative=_informative(res.post, res.theta),
        monotone_violations=res.monotone_violations, **extra,
    )


def fit(dataset: Dataset, config: FitConfig | None = None) -> FittedModel:
    """Fit the progression score model.

    Stage 1 assumes independent voxel noise with per-voxel scales; stage 2
    freezes those scales up to a common factor and adds spatial correlation.
    With ``kernel="auto"`` every candidate family is fitted in stage 2 and
    the one with the highest log-likelihood is returned.
    """
    cfg = config or FitConfig()
    log: list[dict] = []
    s1 = fit_independent(dataset, cfg, log)
    if cfg.stages == 1:
        return _finish(dataset, s1, INDEPENDENT, log, stage1_loglik=s1.loglik,
                       stage1_aic=aic_value(s1.loglik, dataset.K, INDEPENDENT))

    families = (cfg.candidates if str(cfg.kernel).lower() == "auto" else (cfg.kernel,))
    best = None
    cand: dict[str, float] = {}
    for fam in families:
        fam = KernelFamily.parse(fam)
        flog: list[dict] = []
        try:
            res = fit_correlated(dataset, s1, fam, cfg, flog)
        except NumericalError as exc:
            if len(families) == 1:
                raise
            logger.warning("skipping %s kernel: %s", fam.name, exc)
            continue
        for rec in flog:
            rec["family"] = fam.value
        cand[fam.value] = res.loglik
        if best is None or res.loglik > best[1].loglik:
            best = (fam, res, flog)
    if best is None:
        raise NumericalError("no candidate kernel family could be fitted")
    fam, res, flog = best
    if res.theta.noise.corr.jittered:
        logger.warning("selected %s C(rho=%.4g) needed diagonal jitter to factorize",
                       fam.name, res.theta.noise.rho)
    res.monotone_violations += s1.monotone_violations
    model = _finish(dataset, res, CORRELATED, log + flog, stage1_loglik=s1.loglik,
                    stage1_aic=aic_value(s1.loglik, dataset.K, INDEPENDENT),
                    candidate_logliks=cand)
    model.iterations += s1.iterations
    model.converged = bool(res.converged and s1.converged)
    return model


# -- prediction ---------------------------------------------------------------------


def predict_ps(fitted: FittedModel, ages, Y) -> SubjectPosterior:
    """Standardized posterior scores for a (possibly new) subject's visits."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape[1] != fitted.theta.K:
        raise DataError(f"measurement length {Y.shape[1]} != model K={fitted.theta.K}")
    return posterior_subject(ages, Y, fitted.theta)


def predict_traj(theta: ModelParams, s):
    """Voxelwise trajectory values a s + b; ``s`` scalar -> (K,), array -> (len(s), K)."""
    s = np.asarray(s, dtype=float)
    if s.ndim == 0:
        return theta.a * float(s) + theta.b
    return np.outer(s, theta.a) + theta.b


# -- serialization ------------------------------------------------------------------


def _digest(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes()).hexdigest()


def model_to_dict(model: FittedModel) -> dict:
    th = model.theta
    noise = th.noise
    post = model.posteriors
    return {
        "version": MODEL_FORMAT_VERSION,
        "stage": model.stage,
        "kernel_family": noise.family.value,
        "rho": noise.rho,
        "lambda": noise.lam,
        "lambda_diag": noise.scale.tolist() if noise.lam is None else None,
        "lambda_hat": None if noise.lambda_hat is None else noise.lambda_hat.tolist(),
        "lambda_hat_sha256": _digest(model.lambda_hat),
        "a": th.a.tolist(),
        "b": th.b.tolist(),
        "m": th.m.tolist(),
        "nu": th.nu.tolist(),
        "w": model.w,
        "z": model.z,
        "sign_flipped": model.sign_flipped,
        "loglik": model.loglik,
        "aic": model.aic,
        "stage1_loglik": model.stage1_loglik,
        "stage1_aic": model.stage1_aic,
        "candidate_logliks": model.candidate_logliks,
        "iterations": model.iterations,
        "converged": model.converged,
        "informative": model.informative,
        "monotone_violations": model.monotone_violations,
        "grid": {
            "voxel_id": list(model.grid.voxel_ids),
            "position_mm": model.grid.positions.tolist(),
            "roi_label": None if model.grid.roi_labels is None else list(model.grid.roi_labels),
        },
        "subjects": [
            {"subject_id": sid, "alpha": float(post.u_hat[i, 0]), "beta": float(post.u_hat[i, 1]),
             "sigma": post.sigma[i].tolist()}
            for i, sid in enumerate(model.subject_ids)
        ],
        "visits": {
            "subject": model.subject.tolist(),
            "visit_index": model.visit_index.tolist(),
            "age": model.ages.tolist(),
            "s": post.s.tolist(),
        },
        "posterior_aux": {"g": post.g.tolist(), "resid_quad": post.resid_quad.tolist(),
                          "aRa": post.aRa},
        "iteration_log": model.iteration_log,
    }


def model_from_dict(d: dict) -> FittedModel:
    if d.get("version") != MODEL_FORMAT_VERSION:
        raise DataError(f"unsupported model file version {d.get('version')!r}")
    g = d["grid"]
    grid = VoxelGrid(tuple(g["voxel_id"]), np.array(g["position_mm"]),
                     None if g["roi_label"] is None else tuple(g["roi_label"]))
    family = KernelFamily.parse(d["kernel_family"])
    if d["lambda"] is None:
        noise = NoiseCov.independent(d["lambda_diag"])
    else:
        corr = build_correlation(grid.distances, family, d["rho"])
        noise = NoiseCov.scaled(corr, d["lambda"], d["lambda_hat"])
    theta = ModelParams(d["a"], d["b"], d["m"], d["nu"], noise)
    subs = d["subjects"]
    aux = d["posterior_aux"]
    post = Posteriors(
        u_hat=np.array([[s["alpha"], s["beta"]] for s in subs]).reshape(-1, 2),
        sigma=np.array([s["sigma"] for s in subs]).reshape(-1, 2, 2),
        s=np.array(d["visits"]["s"]),
        g=np.array(aux["g"]).reshape(-1, 2),
        resid_quad=np.array(aux["resid_quad"]),
        aRa=aux["aRa"],
    )
    return FittedModel(
        theta=theta, posteriors=post, w=d["w"], z=d["z"], sign_flipped=d["sign_flipped"],
        stage=d["stage"], loglik=d["loglik"], aic=d["aic"], iterations=d["iterations"],
        converged=d["converged"], grid=grid, subject_ids=tuple(s["subject_id"] for s in subs),
        subject=np.array(d["visits"]["subject"], dtype=np.int64),
        visit_index=np.array(d["visits"]["visit_index"], dtype=np.int64),
        ages=np.array(d["visits"]["age"]), iteration_log=d["iteration_log"],
        stage1_loglik=d["stage1_loglik"], stage1_aic=d["stage1_aic"],
        candidate_logliks=d["candidate_logliks"], informative=d["informative"],
        monotone_violations=d["monotone_violations"],
    )


def dumps_model(model: FittedModel) -> str:
    return json.dumps(model_to_dict(model), indent=1, allow_nan=False) + "\n"


def loads_model(text: str) -> FittedModel:
    return model_from_dict(json.loads(text))
