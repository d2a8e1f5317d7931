import numpy as np
import pytest

from f2pad import tensor as T
from f2pad.backends import (
    GaussianField,
    MemoryBank,
    build_candidate_sets,
    coreset_select,
    fit_gaussian_field,
    fit_memory_bank,
    load_backend,
)
from f2pad.gradcheck import numeric_grad, rel_error


def _grad(loss_fn, f):
    leaf = T.Tensor(f, requires_grad=True)
    with T.Tape() as tape:
        out = loss_fn(leaf)
    return out.item(), T.backward(tape, out)[leaf]


# ---------------------------------------------------------------- Gaussian field


def test_identical_features_give_ridge_covariance():
    v = np.array([0.5, -1.0, 2.0])
    stacks = [np.broadcast_to(v, (2, 2, 3)).copy() for _ in range(4)]
    gf = fit_gaussian_field(stacks, ridge=0.25)
    np.testing.assert_allclose(gf.mean, np.broadcast_to(v, (2, 2, 3)))
    cov = np.linalg.inv(gf.precision())
    np.testing.assert_allclose(cov, np.broadcast_to(0.25 * np.eye(3), (2, 2, 3, 3)), rtol=1e-12)


def test_covariance_recovery():
    rng = np.random.default_rng(0)
    samples = rng.normal(size=(10_000, 2)) * np.sqrt([2.0, 1.0])
    stacks = [s.reshape(1, 1, 2) for s in samples]
    gf = fit_gaussian_field(stacks, ridge=1e-6)
    cov = np.linalg.inv(gf.precision()[0, 0])
    np.testing.assert_allclose(np.diag(cov), [2.0, 1.0], rtol=0.05)
    assert abs(cov[0, 1]) < 0.05


def test_zero_ridge_rejected():
    with pytest.raises(ValueError):
        fit_gaussian_field([np.zeros((1, 1, 2))] * 3, ridge=0.0)


def test_gaussian_score_example():
    gf = GaussianField(mean=np.zeros((1, 1, 2)), factor=np.eye(2)[None, None])
    assert gf.scores(np.array([[[3.0, 4.0]]]))[0, 0] == 25.0
    assert gf.loss(np.zeros((1, 1, 2))).item() == 0.0


def test_gaussian_loss_gradient_and_cells():
    rng = np.random.default_rng(1)
    stacks = [rng.normal(size=(3, 4, 3)) for _ in range(20)]
    gf = fit_gaussian_field(stacks, rel_ridge=0.1)
    f = rng.normal(size=(3, 4, 3))
    cells = rng.random((3, 4)) < 0.5
    val, g = _grad(lambda t: gf.loss(t, cells), f)
    assert val == pytest.approx(gf.scores(f)[cells].sum(), rel=1e-12)
    num = numeric_grad(lambda v: gf.loss(v, cells).item(), f)
    assert rel_error(g, num) < 1e-6
    assert np.all(g[~cells] == 0)


def test_gaussian_window_matches_full():
    rng = np.random.default_rng(2)
    gf = fit_gaussian_field([rng.normal(size=(4, 5, 2)) for _ in range(10)], rel_ridge=0.1)
    f = rng.normal(size=(4, 5, 2))
    np.testing.assert_allclose(gf.window(1, 3, 2, 5).scores(f[1:3, 2:5]), gf.scores(f)[1:3, 2:5], rtol=1e-14)


# ---------------------------------------------------------------- memory bank


def test_fps_line_example_and_full_size():
    pts = np.array([[0.0], [1.0], [10.0]])
    assert sorted(coreset_select(pts, 2, start=0)) == [0, 2]
    assert sorted(coreset_select(pts, 3, start=1)) == [0, 1, 2]
    with pytest.raises(ValueError):
        coreset_select(pts, 4)


def test_fps_each_pick_is_true_argmax():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(120, 4))
    sel = coreset_select(pts, 15, start=7)
    for t in range(1, len(sel)):
        d = np.min(((pts[:, None, :] - pts[None, sel[:t], :]) ** 2).sum(-1), axis=1)
        d[sel[:t]] = -np.inf
        assert sel[t] == int(np.argmax(d))


def _bank(rng, n=40, c=2):
    feats = rng.normal(size=(n, c))
    return MemoryBank(features=feats, coreset_indices=np.arange(n))


def test_candidate_size_one_is_nearest_neighbour():
    rng = np.random.default_rng(4)
    bank = _bank(rng)
    f0 = rng.normal(size=(3, 3, 2))
    cand = build_candidate_sets(bank, f0, size=1)
    for i in range(3):
        for j in range(3):
            d = ((bank.features - f0[i, j]) ** 2).sum(1)
            assert cand[i, j, 0] == int(np.argmin(d))


def test_full_candidate_sets_equal_exact():
    rng = np.random.default_rng(5)
    bank = _bank(rng)
    build_candidate_sets(bank, rng.normal(size=(4, 4, 2)), size=40)
    f = rng.normal(size=(4, 4, 2))
    assert bank.loss(f).item() == pytest.approx(bank.scores(f).sum(), rel=1e-14)


def test_patchcore_example():
    bank = MemoryBank(features=np.array([[0.0, 0.0], [3.0, 4.0]]), coreset_indices=np.array([0, 1]))
    bank.candidate_sets = np.array([[[0, 1]]])
    assert bank.loss(np.array([[[0.0, 1.0]]])).item() == 1.0
    assert bank.loss(np.array([[[3.0, 4.0]]])).item() == 0.0


def test_memory_loss_gradient():
    rng = np.random.default_rng(6)
    bank = _bank(rng, n=30, c=3)
    f = rng.normal(size=(3, 3, 3))
    build_candidate_sets(bank, f, size=8)
    _, g = _grad(bank.loss, f)
    assert rel_error(g, numeric_grad(lambda v: bank.loss(v).item(), f)) < 1e-6


def test_candidate_size_validation():
    bank = _bank(np.random.default_rng(7), n=5)
    with pytest.raises(ValueError):
        build_candidate_sets(bank, np.zeros((1, 1, 2)), size=0)
    assert build_candidate_sets(bank, np.zeros((1, 1, 2)), size=50).shape == (1, 1, 5)
    with pytest.raises(ValueError):
        MemoryBank(features=np.zeros((2, 2)), coreset_indices=np.arange(2)).loss(np.zeros((1, 1, 2)))


def test_default_coreset_fraction():
    rng = np.random.default_rng(8)
    bank = fit_memory_bank([rng.normal(size=(5, 4, 2)) for _ in range(5)])
    assert len(bank.coreset_indices) == 10


def test_backend_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    gf = fit_gaussian_field([rng.normal(size=(2, 2, 2)) for _ in range(5)], rel_ridge=0.1)
    gf.save(tmp_path / "g")
    back = load_backend(tmp_path / "g")
    assert back.mean.tobytes() == gf.mean.tobytes() and back.factor.tobytes() == gf.factor.tobytes()
    bank = fit_memory_bank([rng.normal(size=(3, 3, 2)) for _ in range(3)], coreset_fraction=0.5)
    build_candidate_sets(bank, rng.normal(size=(3, 3, 2)), size=4)
    bank.save(tmp_path / "m")
    back = load_backend(tmp_path / "m")
    np.testing.assert_array_equal(back.candidate_sets, bank.candidate_sets)
    np.testing.assert_array_equal(back.coreset_indices, bank.coreset_indices)
