import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from f2pad import datasynth, imageio
from f2pad.datasynth import SynthError, SynthSpec, enforce_contrast, generate, make_suite


def _clean(seed=0, size=32, category="tiles"):
    return imageio.normalize(datasynth.texture(category, size, np.random.default_rng(seed)))


def test_all_zero_source_is_identity():
    n = _clean()
    x, gt, info = generate(n, SynthSpec(mask_source=np.zeros((5, 5), bool)))
    np.testing.assert_array_equal(x, n)
    assert not gt.any() and info.area == 0


def test_all_one_source_gives_constant_image():
    n = np.full((16, 16, 3), imageio.normalize(np.array([0.5, 0.5, 0.5])))
    x, gt, info = generate(n, SynthSpec(mask_source=np.ones((16, 16), bool), resize_range=(1.0, 1.0), seed=3))
    assert gt.all()
    np.testing.assert_array_equal(x, np.broadcast_to(x[0, 0], x.shape))
    if info.adjusted == 0:
        np.testing.assert_allclose(x[0, 0], imageio.normalize(np.array(info.color)), rtol=1e-14)


def test_contrast_over_1000_generations():
    n = _clean(size=32)
    worst = np.inf
    for seed in range(1000):
        x, gt, _ = generate(n, SynthSpec(seed=seed))
        d = np.linalg.norm(x - n, axis=-1)
        worst = min(worst, d[gt].min())
        # ground truth is exactly the support of the difference
        np.testing.assert_array_equal(d > 0, gt)
        assert np.all(x >= imageio.LOWER - 1e-12) and np.all(x <= imageio.UPPER + 1e-12)
    assert worst >= 0.2


def test_contrast_rule_moves_close_pixels():
    n = np.zeros((2, 2, 3))
    x = n.copy()
    x[0, 0] = [0.05, 0.0, 0.0]
    m = np.zeros((2, 2), bool)
    m[0, 0] = True
    m[1, 1] = True  # identical pixel: needs the axis fallback
    out, adjusted = enforce_contrast(x, n, m, 0.2)
    assert adjusted == 2
    assert np.linalg.norm(out[0, 0] - n[0, 0]) >= 0.2
    assert out[0, 0, 0] > 0  # scaled along its own direction
    assert np.linalg.norm(out[1, 1]) >= 0.2


def test_contrast_impossible_raises():
    n = np.zeros((1, 1, 3))
    with pytest.raises(SynthError):
        enforce_contrast(n, n, np.ones((1, 1), bool), 100.0)


def test_determinism_and_seed_sensitivity():
    n = _clean()
    a = generate(n, SynthSpec(seed=7))
    b = generate(n, SynthSpec(seed=7))
    c = generate(n, SynthSpec(seed=8))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert a[1].tobytes() != c[1].tobytes() or a[0].tobytes() != c[0].tobytes()


@settings(max_examples=20)
@given(st.integers(0, 10_000))
def test_area_range_respected(seed):
    x, gt, _ = generate(_clean(size=64), SynthSpec(seed=seed, area_range=(0.01, 0.13)))
    assert 0.01 <= gt.mean() <= 0.13


def test_impossible_area_raises():
    with pytest.raises(SynthError):
        generate(_clean(size=32), SynthSpec(area_range=(0.99, 1.0), resize_range=(0.5, 0.5)))


def test_patch_mode_copies_source():
    n, src = _clean(0), _clean(1, category="stripes")
    x, gt, _ = generate(n, SynthSpec(color_mode="patch", patch_source=src, seed=2, contrast_min=1e-6))
    np.testing.assert_array_equal(x[gt], src[gt])


def test_spec_validation():
    for bad in (SynthSpec(resize_range=(0.0, 1.0)), SynthSpec(contrast_min=0.0), SynthSpec(color_mode="x"), SynthSpec(color_mode="patch")):
        with pytest.raises(ValueError):
            bad.validate()


def test_suite_training_images_independent_of_test_count():
    a, sa = make_suite(size=32, n_train=4, n_test=2, seed=1)
    b, sb = make_suite(size=32, n_train=4, n_test=5, seed=1)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))
    assert sa[1].x.tobytes() == sb[1].x.tobytes()


def test_synth_dataset_manifest(tmp_path):
    datasynth.synth_dataset(tmp_path / "a", size=32, n_train=3, n_test=2, seed=4)
    datasynth.synth_dataset(tmp_path / "b", size=32, n_train=3, n_test=2, seed=4)
    ma = (tmp_path / "a" / "manifest.jsonl").read_text()
    assert ma == (tmp_path / "b" / "manifest.jsonl").read_text()
    entries = datasynth.read_manifest(tmp_path / "a")
    assert [e["split"] for e in entries] == ["train"] * 3 + ["test"] * 2
    for e in entries[3:]:
        assert {"seed", "scale", "row", "col", "image", "mask"} <= set(e)
        gt = imageio.read_mask(tmp_path / "a" / e["mask"])
        assert gt.sum() == e["area"]
