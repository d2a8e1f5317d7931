import numpy as np
import pytest
from hypothesis import given, strategies as st

from f2pad.optimizer import (
    SolverError,
    SolverState,
    adan_step,
    adaptive_steps,
    build_sharing_kernel,
    share_gradients,
    solve,
)


def test_ks_zero_is_center_only():
    k = build_sharing_kernel(np.random.default_rng(0).normal(size=(4, 4, 3)), ks=0)
    assert k.weights.shape == (4, 4, 1) and np.all(k.weights == 1)
    g = np.random.default_rng(1).normal(size=(4, 4, 3))
    np.testing.assert_array_equal(share_gradients(k, g, clip=None), g)
    np.testing.assert_array_equal(share_gradients(k, g), np.clip(g, -0.03, 0.03))


def test_constant_image_ratio_and_normalization():
    k = build_sharing_kernel(np.full((6, 6, 3), 0.1), ks=1, sigma0=1.1)
    w = k.weights[3, 3]
    assert w[k.offset_index(1, 0)] / w[k.offset_index(0, 0)] == pytest.approx(0.40289, abs=5e-6)
    np.testing.assert_allclose(k.weights.sum(-1), 1.0, rtol=1e-14)


def test_uniform_gradient_unchanged():
    k = build_sharing_kernel(np.random.default_rng(2).normal(size=(7, 7, 3)), ks=2)
    g = np.full((7, 7, 3), 0.01)
    np.testing.assert_allclose(share_gradients(k, g), g, rtol=1e-13)


def test_clip_bound():
    k = build_sharing_kernel(np.zeros((3, 3, 3)), ks=1)
    assert np.abs(share_gradients(k, np.full((3, 3, 3), 5.0))).max() == 0.03


def test_adaptive_steps_examples():
    x = np.zeros((1, 1, 3))
    n = -np.array([0.5, 0.25, 0.1]).reshape(1, 1, 3)
    np.testing.assert_allclose(adaptive_steps(x, n, 1.0, 0.01).ravel(), [2.0, 4.0, 10.0])
    np.testing.assert_allclose(adaptive_steps(x, x, 1.0, 0.01), 100.0)
    np.testing.assert_allclose(adaptive_steps(x, n, 2.0, 0.01), 2 * adaptive_steps(x, n, 1.0, 0.01))
    with pytest.raises(ValueError):
        adaptive_steps(x, n, 0.0)


def test_zero_gradient_leaves_n_unchanged():
    st = SolverState(np.random.default_rng(3).normal(size=(3, 3, 3)))
    before = st.n.copy()
    for _ in range(20):
        adan_step(st, np.zeros_like(before), 1.0)
    np.testing.assert_array_equal(st.n, before)


@given(st.floats(-1, 1).filter(lambda v: abs(v) > 1e-3))
def test_constant_direction_moves_opposite(gval):
    st = SolverState(np.zeros((1, 1, 1)))
    prev = 0.0
    for _ in range(30):
        adan_step(st, np.full((1, 1, 1), gval), 1.0, lr=1e-2)
        cur = float(st.n[0, 0, 0])
        assert np.sign(prev - cur) == np.sign(gval) or prev == cur
        prev = cur
    assert np.sign(-prev) == np.sign(gval)


def test_quadratic_bowl_converges():
    target = np.random.default_rng(4).uniform(-1, 1, size=(2, 2, 3))
    st = SolverState(np.zeros_like(target))
    for k in range(2000):
        g = 2 * (st.n - target)
        adan_step(st, g, 1.0, lr=1e-2 / (1 + k / 100))
    assert np.max(np.abs(st.n - target)) < 1e-4


def test_active_mask_freezes_pixels():
    st = SolverState(np.zeros((3, 3, 3)))
    active = np.zeros((3, 3), bool)
    active[1, 1] = True
    adan_step(st, np.ones((3, 3, 3)), 1.0, active=active)
    assert np.all(st.n[~active] == 0) and np.all(st.n[1, 1] < 0)


def test_non_finite_update_raises():
    st = SolverState(np.zeros((1, 1, 1)))
    with pytest.raises(SolverError):
        adan_step(st, np.full((1, 1, 1), np.inf), 1.0)


def _bowl(target):
    def f(n):
        d = n - target
        return float((d * d).sum()), 2 * d
    return f


def test_solve_stationary_terminates_immediately():
    n0 = np.ones((3, 3, 3))
    res = solve(_bowl(n0), n0, build_sharing_kernel(n0, ks=1), n0, loss_threshold=0.05)
    assert res.iterations == 1 and res.converged
    np.testing.assert_array_equal(res.n, n0)


def test_solve_cap_and_log():
    import io

    target = np.full((3, 3, 3), 0.5)
    n0 = np.zeros_like(target)
    log = io.StringIO()
    res = solve(_bowl(target), n0, build_sharing_kernel(n0, ks=1), n0, loss_threshold=0.0, max_iter=25, loss_log=log)
    assert res.iterations == 25 and not res.converged
    assert len(res.losses) == 26 == len(log.getvalue().splitlines())
    assert res.losses[-1] < res.losses[0]


def test_solve_rejects_nan_objective():
    n0 = np.zeros((2, 2, 3))
    with pytest.raises(SolverError):
        solve(lambda n: (float("nan"), n), n0, build_sharing_kernel(n0, ks=0), n0)


def test_cropped_sharing_matches_full_inside_active():
    from f2pad.optimizer import _cropped_sharing

    rng = np.random.default_rng(5)
    x = rng.normal(size=(20, 20, 3))
    k = build_sharing_kernel(x, ks=2)
    active = np.zeros((20, 20), bool)
    active[6:11, 8:12] = True
    g = np.zeros_like(x)
    g[active] = rng.normal(size=(active.sum(), 3))
    full = share_gradients(k, g)
    crop = _cropped_sharing(k, active, 0.03)(g)
    np.testing.assert_allclose(crop[active], full[active], rtol=1e-13, atol=1e-16)
