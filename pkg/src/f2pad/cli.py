"""Command-line entry point.

    f2pad synth     write a synthetic dataset
    f2pad fit       fit extractor statistics, backend and pixel prior
    f2pad detect    baseline score heatmap and initial mask for one image
    f2pad f2pad     full decomposition for one image
    f2pad eval      evaluate methods over a dataset
    f2pad gradcheck finite-difference self-checks

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import datasynth, evalkit, gradcheck, imageio, pipeline
from .config import ConfigError, RunConfig, dump_config, known_keys, load_config
from .datasynth import read_manifest
from .models import Models, fit_models
from .optimizer import SolverError

log = logging.getLogger("f2pad")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class CommandError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


def _overrides(args) -> dict[str, str]:
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def _config(args, **flags) -> RunConfig:
    pairs = _overrides(args)
    for key, value in flags.items():
        if value is not None:
            pairs[key] = str(value)
    return load_config(args.config, pairs)


# ----------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _config(args, data_dir=args.out, synth_seed=args.seed, n_train=args.n_train, n_test=args.n_test)
    try:
        root = datasynth.synth_dataset(
            cfg.data_dir,
            category=cfg.category,
            size=cfg.image_size,
            n_train=cfg.n_train,
            n_test=cfg.n_test,
            seed=cfg.synth_seed,
            contrast_min=cfg.contrast_min,
            area_range=(cfg.area_min, cfg.area_max),
        )
    except OSError as exc:
        raise CommandError(f"cannot write dataset to {cfg.data_dir}: {exc}", EXIT_RUNTIME) from exc
    print(f"wrote {cfg.n_train} train and {cfg.n_test} test samples to {root}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _config(args, data_dir=args.data, model_dir=args.model, backend=args.backend)
    root = Path(cfg.data_dir)
    if not (root / "manifest.jsonl").exists():
        raise CommandError(f"no manifest.jsonl in {root}")
    names = [e["image"] for e in read_manifest(root) if e.get("split") == "train"]
    if args.limit is not None:
        names = names[: args.limit]
    if len(names) < 2:
        raise CommandError(f"need at least 2 training images, found {len(names)}")
    images = [imageio.read_image(root / n, cfg.image_size) for n in names]
    models = fit_models(images, cfg)
    out = models.save(cfg.model_dir)
    (out / "fit.cfg").write_text(dump_config(cfg))
    print(f"fitted {cfg.backend} backend on {len(images)} images -> {out}")
    return EXIT_OK


def _load(cfg: RunConfig, image_path) -> tuple[Models, np.ndarray]:
    models = Models.load(cfg.model_dir)
    x = imageio.read_image(image_path, cfg.image_size)
    try:
        models.extractor.spec.check_input(*x.shape[:2])
        stack = models.extractor.extract(x)
        if models.backend.kind == "gaussian":
            expected = models.backend.shape
        else:
            expected = stack.shape[:2] + models.backend.features.shape[1:]
        if stack.shape != tuple(expected):
            raise ValueError(f"feature map {stack.shape} != model {tuple(expected)}")
    except ValueError as exc:
        raise CommandError(f"image {image_path} does not match the fitted model: {exc}") from exc
    return models, x


def cmd_detect(args) -> int:
    cfg = _config(args, model_dir=args.model)
    models, x = _load(cfg, args.image)
    out = imageio.ensure_dir(args.out)
    scores = pipeline.pixel_scores(models.extractor, models.backend, x)
    f = cfg.f2pad
    m0 = pipeline.initial_mask(scores, f.init_mode, q=f.init_percentile, threshold=f.init_threshold)
    imageio.write_heatmap(out / "heatmap.png", scores)
    imageio.write_mask(out / "mask0.png", m0)
    np.save(out / "scores.npy", scores)
    print(f"initial mask: {int(m0.sum())} pixels -> {out}")
    return EXIT_OK


def cmd_f2pad(args) -> int:
    flags = {
        "model_dir": args.model,
        "no_prior": True if args.no_prior else None,
        "no_sparsity": True if args.no_sparsity else None,
        "init_only": True if args.init_only else None,
        "no_sharing": True if args.no_sharing else None,
    }
    cfg = _config(args, **flags)
    models, x = _load(cfg, args.image)
    out = imageio.ensure_dir(args.out)
    m0 = imageio.read_mask(args.mask, cfg.image_size) if args.mask else None
    with open(out / "losses.tsv", "w") as loss_log:
        res = pipeline.run(x, models.extractor, models.backend, models.prior, cfg.f2pad, m0=m0, loss_log=loss_log)
    imageio.write_mask(out / "mask.png", res.m_star)
    imageio.write_mask(out / "mask0.png", res.m0)
    imageio.write_image(out / "recovered.png", res.n_star)
    heat = np.linalg.norm(res.x - res.n_star, axis=-1)
    imageio.write_heatmap(out / "anomaly.png", heat)
    np.save(out / "mask.npy", res.m_star)
    d = res.diagnostics
    with open(out / "diagnostics.jsonl", "w") as fh:
        summary = {
            "record": "summary",
            "regime": d.get("regime"),
            "m0_area": d.get("m0_area"),
            "m_star_area": int(res.m_star.sum()),
            "active_pixels": d.get("active_pixels"),
            "active_cells": d.get("active_cells"),
            "beta": d.get("beta"),
            "alpha1": d.get("alpha1"),
            "iterations": d.get("solve_iterations"),
            "final_objective": d.get("final_objective"),
            "reestimate_iterations": max(len(d.get("reestimate_losses", [])) - 1, 0),
        }
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
        for stage, secs in d["timings"].items():
            fh.write(json.dumps({"record": "timing", "stage": stage, "seconds": secs}, sort_keys=True) + "\n")
        for it, loss in enumerate(d.get("solve_losses", [])):
            fh.write(json.dumps({"record": "loss", "phase": "solve", "iteration": it, "loss": loss}) + "\n")
        for it, loss in enumerate(d.get("reestimate_losses", [])):
            fh.write(json.dumps({"record": "loss", "phase": "reestimate", "iteration": it, "loss": loss}) + "\n")
    print(f"{summary['regime']}: mask {summary['m_star_area']} px (initial {summary['m0_area']}) -> {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args, data_dir=args.data, model_dir=args.model, out_dir=args.out)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in evalkit.METHODS:
            raise CommandError(f"unknown method {m!r}; choose from {', '.join(evalkit.METHODS)}")
    models = Models.load(cfg.model_dir)
    result = evalkit.run_suite(cfg.data_dir, models, cfg.f2pad, methods, cfg.out_dir, cfg.image_size)
    print(f"threshold\t{result.threshold:.6g}")
    print(f"baseline\tiou={result.baseline_mean('iou'):.3f}\tdice={result.baseline_mean('dice'):.3f}")
    for m in result.methods():
        print(f"{m}\tiou={result.mean(m, 'iou'):.3f}\tdice={result.mean(m, 'dice'):.3f}")
    if result.missing:
        for p in result.missing:
            print(f"missing\t{p}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(seed=args.seed, corrupt=args.corrupt_weights)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(r.name for r in failed)}", file=sys.stderr)
        return EXIT_INVALID
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="f2pad", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument(
            "--set", action="append", metavar="KEY=VALUE",
            help="override a config key (repeatable); keys: " + ", ".join(known_keys()),
        )

    sp = sub.add_parser("synth", help="write a synthetic cut-paste dataset")
    common(sp)
    sp.add_argument("--out", help="dataset directory (data_dir)")
    sp.add_argument("--seed", type=int, help="dataset seed (synth_seed)")
    sp.add_argument("--n-train", type=int, help="normal training images")
    sp.add_argument("--n-test", type=int, help="defective test images")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("fit", help="fit backend and pixel prior on training images")
    common(sp)
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--model", help="output model directory")
    sp.add_argument("--backend", choices=["gaussian", "memory"])
    sp.add_argument("--limit", type=int, help="use only the first N training images (few-shot)")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("detect", help="baseline heatmap and initial mask")
    common(sp)
    sp.add_argument("--model", help="model directory")
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("f2pad", help="decompose one image and write its mask")
    common(sp)
    sp.add_argument("--model", help="model directory")
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask", help="initial mask PNG (default: from baseline scores)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--no-prior", action="store_true", help="drop the pixel prior term")
    sp.add_argument("--no-sparsity", action="store_true", help="drop the sparsity term")
    sp.add_argument("--init-only", action="store_true", help="skip the solve; mask from the inpainted image")
    sp.add_argument("--no-sharing", action="store_true", help="disable gradient sharing (ks = 0)")
    sp.set_defaults(func=cmd_f2pad)

    sp = sub.add_parser("eval", help="evaluate methods over a dataset")
    common(sp)
    sp.add_argument("--data", help="dataset directory")
    sp.add_argument("--model", help="model directory")
    sp.add_argument("--out", help="results directory")
    sp.add_argument("--methods", default="f2pad", help="comma list of: " + ", ".join(evalkit.METHODS))
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference checks of every gradient")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--corrupt-weights", action="store_true", help="inject a NaN weight (the check must fail)")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (pipeline.StageError, SolverError, RuntimeError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
