from dataclasses import replace

import numpy as np
import pytest
from scipy import optimize

from conftest import random_dataset, random_grid, random_theta, synth_dataset
from progscore.data import Dataset, VoxelGrid
from progscore.errors import DegenerateScoresError
from progscore.estep import e_step, q_function
from progscore.mstep import (
    initial_rho,
    optimal_v,
    update_lambda_diag,
    update_lambda_fixed_rho,
    update_lambda_rho,
    update_m,
    update_traj,
)
from progscore.spatial import NoiseCov, build_correlation, correlation, nu_from_v, rho_bounds


def _fd_grad(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h * max(1.0, abs(x[i]))
        g[i] = (f(x + e) - f(x - e)) / (2 * e[i])
    return g


@pytest.mark.parametrize("seed", range(6))
def test_closed_forms_are_stationary(seed):
    rng = np.random.default_rng(seed)
    d = random_dataset(rng, n=6, K=3)
    theta = random_theta(rng, d.grid, stage=1 + seed % 2)
    post = e_step(d, theta)
    a, b = update_traj(d, post)
    m = update_m(post)
    nu = nu_from_v(optimal_v(post, m))
    new = theta.with_(a=a, b=b, m=m, nu=nu)
    K = d.K

    def q_ab(x):
        return q_function(d, new.with_(a=x[:K], b=x[K:]), post)

    def q_m(x):
        return q_function(d, new.with_(m=x), post)

    def q_nu(x):
        return q_function(d, new.with_(nu=x), post)

    scale = abs(q_function(d, new, post))
    assert np.abs(_fd_grad(q_ab, np.r_[a, b])).max() < 1e-5 * max(scale, 1)
    assert np.abs(_fd_grad(q_m, m)).max() < 1e-5 * max(scale, 1)
    assert np.abs(_fd_grad(q_nu, nu)).max() < 1e-5 * max(scale, 1)


def test_v_matches_numerical_optimum():
    rng = np.random.default_rng(11)
    d = random_dataset(rng, n=8, K=2)
    theta = random_theta(rng, d.grid)
    post = e_step(d, theta)
    m = update_m(post)
    base = theta.with_(m=m)
    res = optimize.minimize(lambda x: -q_function(d, base.with_(nu=x), post), theta.nu,
                            method="Nelder-Mead", options={"xatol": 1e-12, "fatol": 1e-14, "maxiter": 20000})
    assert np.allclose(base.with_(nu=res.x).V, optimal_v(post, m), rtol=1e-6, atol=1e-10)


def test_q_at_update_beats_perturbations():
    rng = np.random.default_rng(12)
    d = random_dataset(rng, n=6, K=3)
    theta = random_theta(rng, d.grid)
    post = e_step(d, theta)
    a, b = update_traj(d, post)
    m = update_m(post)
    new = theta.with_(a=a, b=b, m=m, nu=nu_from_v(optimal_v(post, m)))
    q0 = q_function(d, new, post)
    for _ in range(100):
        pert = new.with_(a=a + rng.normal(0, 0.01, 3), b=b + rng.normal(0, 0.01, 3),
                         m=m + rng.normal(0, 1e-3, 2), nu=new.nu + rng.normal(0, 0.01, 3))
        assert q_function(d, pert, post) <= q0 + 1e-9


def test_noiseless_traj_exact():
    g = VoxelGrid(("x", "y"), [[0, 0, 0], [1, 0, 0]])
    ages = np.array([60.0, 62, 70, 71, 80])
    s = 0.05 * ages - 3.0
    a, b = np.array([0.4, -1.0]), np.array([1.0, 2.0])
    d = Dataset(g, tuple("pqrst"), range(5), [1] * 5, ages, np.outer(s, a) + b)
    theta = random_theta(np.random.default_rng(0), g, stage=1)
    post = e_step(d, theta)
    exact = replace(post, s=s, sigma=np.zeros_like(post.sigma))
    a_hat, b_hat = update_traj(d, exact)
    assert np.allclose(a_hat, a, atol=1e-12) and np.allclose(b_hat, b, atol=1e-11)


def test_degenerate_scores_raise():
    rng = np.random.default_rng(13)
    d = random_dataset(rng, n=3, K=2)
    post = e_step(d, random_theta(rng, d.grid))
    flat = replace(post, s=np.full(d.N, 0.7), sigma=np.zeros_like(post.sigma))
    with pytest.raises(DegenerateScoresError):
        update_traj(d, flat)


def test_m_and_v_examples():
    rng = np.random.default_rng(0)
    d = random_dataset(rng, n=2, K=1)
    post = e_step(d, random_theta(rng, d.grid))
    p = replace(post, u_hat=np.array([[1.0, 0.0], [3.0, 2.0]]), sigma=np.zeros((2, 2, 2)))
    assert np.allclose(update_m(p), [2.0, 1.0])
    V = optimal_v(p, update_m(p))
    # exact answer is rank one; the ridge keeps it invertible and tiny
    assert np.linalg.eigvalsh(V)[0] > 0
    assert np.allclose(V, [[1, 1], [1, 1]], atol=1e-7)


def test_lambda_diag_examples():
    g = VoxelGrid(("x", "y"), [[0, 0, 0], [1, 0, 0]])
    # zero slope, residual variance 4 in voxel x, constant voxel y hits the floor
    Y = np.column_stack([[1.0, 5.0, 1.0, 5.0], [3.0, 3.0, 3.0, 3.0]])
    d = Dataset(g, tuple("pqrs"), range(4), [1] * 4, [60.0, 61, 62, 63], Y)
    theta = random_theta(np.random.default_rng(0), g, stage=1)
    post = e_step(d, theta)
    lam = update_lambda_diag(d, post, np.zeros(2), np.array([3.0, 3.0]))
    assert lam[0] == pytest.approx(2.0, abs=1e-12)
    assert lam[1] == pytest.approx(1e-6 * 1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_lambda_diag_maximizes_q(seed):
    rng = np.random.default_rng(20 + seed)
    d = random_dataset(rng, n=6, K=3)
    theta = random_theta(rng, d.grid, stage=1)
    post = e_step(d, theta)
    a, b = update_traj(d, post)
    lam = update_lambda_diag(d, post, a, b)
    base = theta.with_(a=a, b=b)
    for k in range(3):
        def neg(x, k=k):
            s = lam.copy()
            s[k] = x
            return -q_function(d, base.with_(noise=NoiseCov.independent(s)), post)

        res = optimize.minimize_scalar(neg, bounds=(lam[k] / 5, lam[k] * 5), method="bounded",
                                       options={"xatol": 1e-12})
        assert res.x == pytest.approx(lam[k], rel=1e-4)


@pytest.mark.parametrize("family", ["exponential", "gaussian", "rational_quadratic", "spherical"])
def test_lambda_fixed_rho_is_optimal(family):
    rng = np.random.default_rng(30)
    g = random_grid(rng, 4)
    d = random_dataset(rng, n=6, grid=g)
    theta = random_theta(rng, g, family=family)
    post = e_step(d, theta)
    corr = theta.noise.corr
    lam = update_lambda_fixed_rho(d, post, theta.a, theta.b, theta.noise.lambda_hat, corr)

    def neg(x):
        return -q_function(d, theta.with_(noise=NoiseCov.scaled(corr, x, theta.noise.lambda_hat)), post)

    res = optimize.minimize_scalar(neg, bounds=(lam / 10, lam * 10), method="bounded",
                                   options={"xatol": 1e-12})
    assert res.x == pytest.approx(lam, rel=1e-4)


def test_noise_step_never_decreases_q():
    rng = np.random.default_rng(40)
    g = VoxelGrid.regular((3, 3, 1), 4.0)
    theta = random_theta(rng, g, family="exponential")
    d = synth_dataset(rng, theta, g, n=20)
    post = e_step(d, theta)
    bounds = rho_bounds(g.distances)
    lam, rho = theta.noise.lam, theta.noise.rho
    prev = -np.inf
    for _ in range(10):
        upd = update_lambda_rho(d, post, theta.a, theta.b, theta.noise.lambda_hat, "exponential",
                                lam, rho, g.distances, bounds)
        assert upd.objective >= prev - 1e-9
        prev, lam, rho = upd.objective, upd.lam, upd.corr.rho


def _fit_noise(d, theta, family, grid, rounds=30):
    post = e_step(d, theta)
    bounds = rho_bounds(grid.distances)
    lam, rho = initial_rho(d, post, theta.a, theta.b, theta.noise.lambda_hat, family, grid.distances, bounds)
    for _ in range(rounds):
        upd = update_lambda_rho(d, post, theta.a, theta.b, theta.noise.lambda_hat, family,
                                lam, rho, grid.distances, bounds)
        lam, rho = upd.lam, upd.corr.rho
        if not upd.improved:
            break
    return lam, rho


def test_rho_recovered_from_correlated_noise():
    rng = np.random.default_rng(41)
    g = VoxelGrid.regular((4, 4, 2), 4.0)
    lam_hat = rng.uniform(0.1, 0.3, g.K)
    theta = random_theta(rng, g, stage=1).with_(
        noise=NoiseCov.scaled(build_correlation(g.distances, "exponential", 6.0), 1.0, lam_hat))
    d = synth_dataset(rng, theta, g, n=80)
    lam, rho = _fit_noise(d, theta, "exponential", g)
    assert rho == pytest.approx(6.0, rel=0.25)
    assert lam == pytest.approx(1.0, rel=0.1)


def test_white_noise_gives_negligible_correlation():
    rng = np.random.default_rng(42)
    g = VoxelGrid.regular((4, 4, 2), 4.0)
    theta = random_theta(rng, g, stage=1)
    theta = theta.with_(noise=NoiseCov.scaled(build_correlation(g.distances, "identity"), 1.0, theta.noise.scale))
    d = synth_dataset(rng, theta, g, n=80)
    lam, rho = _fit_noise(d, theta, "exponential", g)
    assert lam == pytest.approx(1.0, rel=0.1)
    assert correlation("exponential", 4.0, rho) < 0.05
