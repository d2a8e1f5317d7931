import json
import os

import numpy as np
import pytest

from f2pad import cli, imageio

SMALL = ["--set", "image_size=32", "--set", "n_train=6", "--set", "n_test=2", "--set", "rel_ridge=0.1",
         "--set", "max_iter=15", "--set", "dilation_radius=2", "--set", "area_min=0.02", "--set", "area_max=0.13"]


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(root / "data"), *SMALL]) == 0
    assert cli.main(["fit", "--data", str(root / "data"), "--model", str(root / "model"), *SMALL]) == 0
    return root


def run(root, *args):
    return cli.main([*args, "--model", str(root / "model"), *SMALL])


def test_synth_train_only(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path / "d"), "--n-test", "0", *SMALL]) == 0
    lines = (tmp_path / "d" / "manifest.jsonl").read_text().splitlines()
    assert len(lines) == 6 and all('"train"' in line for line in lines)


def test_synth_fixed_seed_same_manifest(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["synth", "--out", str(tmp_path / name), "--seed", "3", *SMALL]) == 0
    assert (tmp_path / "a" / "manifest.jsonl").read_bytes() == (tmp_path / "b" / "manifest.jsonl").read_bytes()


def test_synth_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["synth", "--out", str(blocker / "sub"), *SMALL]) == 2


def test_refit_is_bitwise_identical(fitted, tmp_path):
    assert cli.main(["fit", "--data", str(fitted / "data"), "--model", str(tmp_path / "m"), *SMALL]) == 0
    # fit.cfg records the output path, so only the model files are compared
    for f in sorted(set(os.listdir(fitted / "model")) - {"fit.cfg"}):
        assert (fitted / "model" / f).read_bytes() == (tmp_path / "m" / f).read_bytes(), f


def test_fit_few_shot_and_memory_backend(fitted, tmp_path):
    assert cli.main(["fit", "--data", str(fitted / "data"), "--model", str(tmp_path / "m"), "--limit", "4", "--backend", "memory", *SMALL]) == 0
    assert (tmp_path / "m" / "backend.txt").read_text().strip() == "memory"
    assert cli.main(["fit", "--data", str(fitted / "data"), "--model", str(tmp_path / "m"), "--limit", "1", *SMALL]) == 1
    assert cli.main(["fit", "--data", str(tmp_path / "none"), "--model", str(tmp_path / "m"), *SMALL]) == 1


def test_detect_deterministic(fitted):
    img = str(fitted / "data" / "test" / "0000.png")
    for k in range(2):
        assert run(fitted, "detect", "--image", img, "--out", str(fitted / f"det{k}")) == 0
    for f in ("heatmap.png", "mask0.png", "scores.npy"):
        assert (fitted / "det0" / f).read_bytes() == (fitted / "det1" / f).read_bytes()


def test_detect_heatmap_peak_on_planted_defect(fitted):
    img = str(fitted / "data" / "test" / "0001.png")
    assert run(fitted, "detect", "--image", img, "--out", str(fitted / "peak")) == 0
    scores = np.load(fitted / "peak" / "scores.npy")
    gt = imageio.read_mask(fitted / "data" / "test" / "0001_mask.png")
    from f2pad.pipeline import dilate

    assert dilate(gt, 2)[np.unravel_index(np.argmax(scores), scores.shape)]


def test_model_image_mismatch(fitted, tmp_path, capsys):
    imageio.write_image(tmp_path / "odd.png", np.zeros((24, 24, 3)))
    out = str(tmp_path / "o")
    args = ["detect", "--image", str(tmp_path / "odd.png"), "--out", out]
    assert cli.main([*args, "--model", str(fitted / "model"), *SMALL, "--set", "image_size=24"]) == 1
    assert "does not match the fitted model" in capsys.readouterr().err
    assert cli.main([*args, "--model", str(tmp_path / "nomodel"), *SMALL]) == 1


def test_f2pad_outputs_and_flags(fitted):
    img = str(fitted / "data" / "test" / "0000.png")
    regimes = {"full": [], "np": ["--no-prior"], "ns": ["--no-sparsity"], "io": ["--init-only"], "nsh": ["--no-sharing"]}
    seen = {}
    for key, flags in regimes.items():
        out = fitted / f"f2_{key}"
        assert run(fitted, "f2pad", "--image", img, "--out", str(out), *flags) == 0
        recs = [json.loads(line) for line in (out / "diagnostics.jsonl").read_text().splitlines()]
        seen[key] = recs[0]["regime"]
        for f in ("mask.png", "mask0.png", "recovered.png", "anomaly.png", "mask.npy", "losses.tsv"):
            assert (out / f).exists()
    assert seen == {"full": "f2pad", "np": "no-prior", "ns": "no-sparsity", "io": "init-only", "nsh": "no-sharing"}
    out = fitted / "f2_full"
    recs = [json.loads(line) for line in (out / "diagnostics.jsonl").read_text().splitlines()]
    losses = [r["loss"] for r in recs if r["record"] == "loss" and r["phase"] == "solve"]
    tsv = [float(line.split("\t")[1]) for line in (out / "losses.tsv").read_text().splitlines()]
    assert losses == tsv and recs[0]["iterations"] == len(tsv) - 1
    assert {r["stage"] for r in recs if r["record"] == "timing"} >= {"inpaint", "solve"}


def test_f2pad_with_given_mask(fitted, tmp_path):
    m = np.zeros((32, 32), bool)
    m[10:14, 10:14] = True
    imageio.write_mask(tmp_path / "m.png", m)
    out = tmp_path / "o"
    assert run(fitted, "f2pad", "--image", str(fitted / "data" / "test" / "0000.png"), "--mask", str(tmp_path / "m.png"), "--out", str(out)) == 0
    np.testing.assert_array_equal(imageio.read_mask(out / "mask0.png"), m)


def test_eval_and_missing_files(fitted, tmp_path):
    out = tmp_path / "ev"
    args = ["eval", "--data", str(fitted / "data"), "--out", str(out), "--methods", "f2pad,init-only"]
    assert run(fitted, *args) == 0
    assert (out / "results.tsv").exists()
    assert run(fitted, "eval", "--data", str(fitted / "data"), "--out", str(out), "--methods", "bogus") == 1
    import shutil

    shutil.copytree(fitted / "data", tmp_path / "data2")
    (tmp_path / "data2" / "test" / "0000_mask.png").unlink()
    assert run(fitted, "eval", "--data", str(tmp_path / "data2"), "--out", str(tmp_path / "ev2")) == 2


def test_gradcheck_exit_codes(capsys):
    assert cli.main(["gradcheck"]) == 0
    text = capsys.readouterr().out
    assert "PASS\tconv2d" in text and "max_rel_err=" in text
    assert cli.main(["gradcheck", "--corrupt-weights"]) == 1
    assert "FAIL\tobjective_corrupted" in capsys.readouterr().out


def test_invalid_config_exit_code(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("mystery = 1\n")
    assert cli.main(["synth", "--config", str(p), "--out", str(tmp_path / "x")]) == 1


def test_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        cli.main(["--help"])
    text = capsys.readouterr().out
    for sub in ("synth", "fit", "detect", "f2pad", "eval", "gradcheck"):
        assert sub in text
