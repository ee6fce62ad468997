import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from progscore.data import DataError, VoxelGrid
from progscore.em import FitConfig, fit
from progscore.inference import (
    BootstrapSamples,
    bootstrap,
    bootstrap_p_value,
    ci,
    load_bootstrap,
    percentile_interval,
    resample_indices,
    roi_trajectory,
    save_bootstrap,
    test_level,
    test_rate,
)
from progscore.params import ModelParams
from progscore.simulation import SimDesign, simulate
from progscore.spatial import NoiseCov

CFG = FitConfig(kernel="exponential", max_iter_stage2=300)
SMALL = dict(n=30, max_visits=4, grid_shape=(2, 2, 2), family="exponential", rho=5.0, a_range=(0.2, 0.6))


def fake_samples(a, b, grid):
    R = len(a)
    return BootstrapSamples(
        B=R, seed=0, family="exponential", rho_fixed=1.0, grid=grid, replicate=np.arange(R),
        indices=np.zeros((R, 2), dtype=np.int64), a=np.asarray(a, float), b=np.asarray(b, float),
        m=np.zeros((R, 2)), V=np.tile(np.eye(2), (R, 1, 1)), lam=np.ones(R),
        alpha=np.zeros((R, 2)), beta=np.zeros((R, 2)), s=np.zeros((R, 3)))


GRID4 = VoxelGrid(("p", "q", "r", "t"), np.arange(12.0).reshape(4, 3), ("L", "L", "R", "R"))


def test_percentile_example():
    lo, hi = percentile_interval(np.arange(1.0, 101.0), 0.90)[0]
    assert lo == pytest.approx(5.95, abs=1e-12) and hi == pytest.approx(95.05, abs=1e-12)


def test_percentile_constant_and_nesting():
    assert percentile_interval(np.full(50, 3.0)).tolist() == [[3.0, 3.0]]
    x = np.random.default_rng(0).normal(size=200)
    narrow, wide = percentile_interval(x, 0.80)[0], percentile_interval(x, 0.95)[0]
    assert wide[0] <= narrow[0] and narrow[1] <= wide[1]


def test_too_few_replicates():
    with pytest.raises(ValueError, match="at least 20"):
        percentile_interval(np.arange(19.0))


def test_p_value_examples():
    assert bootstrap_p_value(np.arange(1.0, 101.0)) == (0.01, True)
    p, clamped = bootstrap_p_value(np.linspace(-1, 1, 101))
    assert p == pytest.approx(1.0, abs=0.02) and not clamped
    assert bootstrap_p_value(np.zeros(40)) == (1.0, False)
    assert bootstrap_p_value(np.r_[-np.ones(3), np.ones(97)]) == (0.06, False)


@settings(max_examples=50, deadline=None)
@given(st.integers(20, 300), st.integers(0, 2**31), st.floats(0.01, 100))
def test_p_value_scale_invariant(B, seed, c):
    T = np.random.default_rng(seed).normal(0.3, 1.0, B)
    assert bootstrap_p_value(T) == bootstrap_p_value(c * T)


def _ci_excludes_zero(T, gamma):
    lo, hi = np.quantile(T, [gamma / 2, 1 - gamma / 2], method="inverted_cdf")
    return lo > 0 or hi < 0


@pytest.mark.parametrize("seed", range(20))
def test_p_value_is_smallest_excluding_level(seed):
    rng = np.random.default_rng(seed)
    B = int(rng.integers(20, 400))
    T = np.round(rng.normal(rng.uniform(-2, 2), 1.0, B), 1)  # rounding creates ties at 0
    p, clamped = bootstrap_p_value(T)
    if clamped or p >= 1.0:
        return
    lo, hi = 1e-12, 1.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if _ci_excludes_zero(T, mid) else (mid, hi)
    assert p == pytest.approx(hi, abs=1e-9)


def test_resample_indices_golden():
    assert resample_indices(3, 12345, 0).tolist() == [1, 1, 2]
    assert resample_indices(3, 12345, 1).tolist() == [2, 1, 2]
    assert resample_indices(5, 0, 7).tolist() == [0, 2, 0, 3, 4]


def test_roi_trajectory_examples():
    th = ModelParams([1.0, 3.0, 0.0, 0.0], [0.0, 2.0, 5.0, 5.0], [0, 0], [0, 0, 0],
                     NoiseCov.independent(np.ones(4)))
    assert roi_trajectory(th, GRID4, "L", 2.0) == pytest.approx(2 * 2.0 + 1.0)
    assert roi_trajectory(th, GRID4, "R", [0.0, 1.0]).tolist() == [5.0, 5.0]
    with pytest.raises(DataError):
        roi_trajectory(th, GRID4, "X", 0.0)


def test_level_and_rate_on_dominating_roi():
    rng = np.random.default_rng(1)
    R = 200
    a = np.column_stack([rng.normal(1.0, 0.05, (R, 2)), rng.normal(0.2, 0.05, (R, 2))])
    b = rng.normal(1.0, 0.05, (R, 4))
    smp = fake_samples(a, b, GRID4)
    res = test_level(smp, "L", 2.0)
    assert res.p_value == pytest.approx(1 / R) and res.clamped
    assert res.record() == {"roi": "L", "s": 2.0, "p": 1 / R, "B": R, "clamp_flag": True}
    assert test_rate(smp, "L").p_value == pytest.approx(1 / R)
    assert test_rate(smp, "R").p_value == pytest.approx(1 / R)  # T < 0 everywhere is also decisive


def test_identical_rois_give_p_one():
    a = np.tile([0.5, 0.5, 0.5, 0.5], (30, 1))
    smp = fake_samples(a, np.ones((30, 4)), GRID4)
    assert test_rate(smp, "L").p_value == 1.0
    assert test_level(smp, "R", -1.0).p_value == 1.0


def test_roi_summaries_consistent():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(25, 4)), rng.normal(size=(25, 4))
    smp = fake_samples(a, b, GRID4)
    s = np.array([-1.0, 0.0, 2.5])
    out = smp.roi_summaries(s)
    assert np.allclose(out["L"], a[:, :2].mean(1)[:, None] * s + b[:, :2].mean(1)[:, None], rtol=1e-12, atol=1e-12)


def test_missing_roi_labels():
    g = VoxelGrid(("p", "q"), np.zeros((2, 3)) + [[0, 0, 0], [1, 0, 0]])
    smp = fake_samples(np.ones((20, 2)), np.ones((20, 2)), g)
    with pytest.raises(DataError, match="ROI"):
        test_rate(smp, "L")


@pytest.fixture(scope="module")
def boot():
    d, _ = simulate(SimDesign(seed=3, **SMALL))
    model = fit(d, CFG)
    return d, model, bootstrap(d, model, B=24, seed=7, config=CFG)


def test_bootstrap_uses_documented_resamples(boot):
    d, model, smp = boot
    assert smp.rho_fixed == model.rho and smp.family == "exponential"
    for r in range(smp.B):
        assert smp.indices[r].tolist() == resample_indices(d.n, 7, r).tolist()
    assert smp.n_usable + len(smp.excluded) == smp.B
    assert smp.n_usable >= 20
    lo, hi = ci(smp, "b")[0]
    assert lo <= hi


def test_bootstrap_deterministic_and_thread_independent(boot):
    d, model, _ = boot
    one = bootstrap(d, model, B=2, seed=11, config=CFG)
    two = bootstrap(d, model, B=2, seed=11, config=CFG, n_jobs=2)
    for q in ("a", "b", "m", "V", "lambda", "s"):
        assert np.array_equal(one.quantity(q), two.quantity(q))


def test_bootstrap_roi_summaries_match(boot):
    _, _, smp = boot
    for j, (name, ix) in enumerate(smp.grid.rois().items()):
        assert np.allclose(smp.roi_a[:, j], smp.a[:, ix].mean(1), rtol=1e-12, atol=1e-12)
        assert smp.roi_names[j] == name


def test_save_load_round_trip(boot, tmp_path):
    d, _, smp = boot
    save_bootstrap(smp, d, tmp_path)
    assert (tmp_path / "ci_summary.csv").exists()
    back = load_bootstrap(tmp_path, d.grid)
    for q in ("a", "b", "m", "V", "lambda", "alpha", "beta", "s"):
        assert np.array_equal(back.quantity(q), smp.quantity(q))
    assert np.array_equal(back.indices, smp.indices)
    assert np.array_equal(back.roi_a, smp.roi_a)


def test_load_rejects_wrong_grid(boot, tmp_path):
    d, _, smp = boot
    save_bootstrap(smp, d, tmp_path)
    with pytest.raises(DataError):
        load_bootstrap(tmp_path, VoxelGrid(("x",), [[0, 0, 0]]))
