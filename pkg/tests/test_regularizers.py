import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra.numpy import arrays

from f2pad.gradcheck import numeric_grad, rel_error
from f2pad.regularizers import MOGPixelPrior, fit_mog, log_penalty, mog_prior_energy, tv_energy

pixels = arrays(np.float64, (3, 4, 3), elements=st.floats(-2, 2, allow_nan=False), unique=True)


def test_log_penalty_at_zero():
    v, g = log_penalty(np.zeros((2, 3, 3)), 1e-4)
    assert v / 6 == pytest.approx(-4.605170, abs=5e-7)
    assert np.all(g == 0)


def test_log_penalty_unit_vector():
    v, _ = log_penalty(np.array([[[1.0, 0.0, 0.0]]]), 1e-4)
    assert v == pytest.approx(0.693172, abs=5e-7)
    assert v == pytest.approx(np.log(np.sqrt(1.0001) + 1), rel=1e-15)


@given(pixels)
def test_log_penalty_gradient(a):
    a = np.where(np.abs(a) < 1e-3, 0.3, a)
    _, g = log_penalty(a, 1e-4)
    assert rel_error(g, numeric_grad(lambda v: log_penalty(v, 1e-4)[0], a)) < 1e-6


def test_log_penalty_eps_contract():
    with pytest.raises(ValueError):
        log_penalty(np.zeros((1, 1, 3)), 0.0)


def test_tv_constant_and_step():
    assert tv_energy(np.full((4, 5, 3), 0.2), 0.0)[0] == 0.0
    h, c = 6, 0.7
    img = np.zeros((h, 2, 3))
    img[:, 1] = c
    assert tv_energy(img, 0.0)[0] == pytest.approx(h * c * np.sqrt(3), rel=1e-14)


@given(pixels)
def test_tv_gradient(n):
    # central differences are only valid away from the zero-difference kink
    for axis in (0, 1):
        assume(np.linalg.norm(np.diff(n, axis=axis), axis=-1).min() > 1e-2)
    _, g = tv_energy(n, 1e-12)
    assert rel_error(g, numeric_grad(lambda v: tv_energy(v, 1e-12)[0], n)) < 1e-4


def test_mog_energy_example():
    prior = MOGPixelPrior(weights=[0.5, 0.5], means=[[0, 0, 0], [1, 1, 1]], covariances=[np.eye(3)] * 2)
    v, _ = mog_prior_energy(prior, np.array([[[0.1, 0.0, 0.0]]]))
    assert v == pytest.approx(0.01, rel=1e-12)
    assert prior.component_distances(np.array([0.1, 0.0, 0.0]))[1] == pytest.approx(2.81, rel=1e-12)
    assert mog_prior_energy(prior, np.ones((2, 2, 3)))[0] == 0.0


def test_mog_energy_gradient():
    rng = np.random.default_rng(0)
    prior = fit_mog(rng.normal(size=(500, 3)) + rng.integers(0, 3, size=(500, 1)), 3)
    n = rng.normal(size=(3, 3, 3))
    _, g = mog_prior_energy(prior, n)
    assert rel_error(g, numeric_grad(lambda v: mog_prior_energy(prior, v)[0], n)) < 1e-6


def test_single_component_is_sample_moments():
    x = np.random.default_rng(1).normal(size=(400, 3)) @ np.diag([1.0, 0.5, 2.0])
    prior = fit_mog(x, 1)
    np.testing.assert_allclose(prior.means[0], x.mean(0), atol=1e-10)
    np.testing.assert_allclose(prior.covariances[0], np.cov(x.T, bias=True), atol=1e-9)


def test_two_clusters_recovered():
    rng = np.random.default_rng(2)
    mu = np.array([[2.0, 2.0, 2.0], [-2.0, 1.0, -3.0]])
    x = np.concatenate([m + 0.1 * rng.normal(size=(1000, 3)) for m in mu])
    prior = fit_mog(x, 2)
    got = prior.means[np.argsort(prior.means[:, 0])[::-1]]
    np.testing.assert_allclose(got, mu, rtol=0.02)


@pytest.mark.parametrize("seed", range(5))
def test_em_log_likelihood_non_decreasing(seed):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(loc=rng.uniform(-3, 3, 3), scale=0.3, size=(200, 3)) for _ in range(4)])
    prior = fit_mog(x, 3, seed=seed)
    assert np.all(np.diff(prior.log_likelihood) >= -1e-9)


def test_fit_mog_contract():
    with pytest.raises(ValueError):
        fit_mog(np.zeros((5, 3)), 1)
    with pytest.raises(ValueError):
        fit_mog(np.random.default_rng(0).normal(size=(50, 3)), 0)


def test_prior_round_trip(tmp_path):
    prior = fit_mog(np.random.default_rng(3).normal(size=(200, 3)), 2)
    prior.save(tmp_path)
    back = MOGPixelPrior.load(tmp_path)
    assert back.means.tobytes() == prior.means.tobytes()
    assert back.covariances.tobytes() == prior.covariances.tobytes()
