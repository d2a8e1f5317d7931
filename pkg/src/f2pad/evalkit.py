"""Segmentation metrics and the evaluation harness.

Scores are IOU and DICE scaled by 100.  Samples are grouped by defect size
(defect area / image area) into the bins of :data:`SIZE_BINS`.
"""
from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import imageio, pipeline
from .config import F2PADConfig

log = logging.getLogger(__name__)

SIZE_BINS = (0.0, 0.02, 0.04, 0.06, 0.08, 0.13)

# method name -> F2PADConfig overrides
METHODS = {
    "f2pad": {},
    "init-only": {"init_only": True},
    "no-prior": {"no_prior": True},
    "no-sparsity": {"no_sparsity": True},
    "no-sharing": {"no_sharing": True},
}


@dataclass(frozen=True)
class SegMetrics:
    iou: float
    dice: float


def iou_dice(m: np.ndarray, gt: np.ndarray) -> SegMetrics:
    """IOU = 100 |m & gt| / |m | gt|, DICE = 100 * 2 |m & gt| / (|m| + |gt|).

    Two empty masks score (100, 100), with a warning.
    """
    m = np.asarray(m, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if m.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {m.shape} vs {gt.shape}")
    inter = int(np.count_nonzero(m & gt))
    union = int(np.count_nonzero(m | gt))
    if union == 0:
        warnings.warn("both masks empty; scoring as a perfect match", stacklevel=2)
        return SegMetrics(100.0, 100.0)
    total = int(np.count_nonzero(m)) + int(np.count_nonzero(gt))
    return SegMetrics(100.0 * inter / union, 100.0 * 2.0 * inter / total)


def size_group(size: float, bins=SIZE_BINS) -> int:
    """Index of the bin holding ``size``; sizes past the last edge join the last bin."""
    if size < bins[0]:
        raise ValueError(f"negative size {size}")
    idx = int(np.searchsorted(bins, size, side="right")) - 1
    return min(max(idx, 0), len(bins) - 2)


def group_label(idx: int, bins=SIZE_BINS) -> str:
    return f"[{bins[idx]:g},{bins[idx + 1]:g})"


@dataclass
class SampleRow:
    sample: str
    size: float
    group: int
    method: str
    base: SegMetrics
    result: SegMetrics
    seconds: float
    final_objective: float | None = None

    @property
    def d_iou(self) -> float:
        return self.result.iou - self.base.iou

    @property
    def d_dice(self) -> float:
        return self.result.dice - self.base.dice


@dataclass
class SuiteResult:
    rows: list[SampleRow]
    threshold: float
    missing: list[str] = field(default_factory=list)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def mean(self, method: str, metric: str = "iou") -> float:
        vals = [getattr(r.result, metric) for r in self.rows if r.method == method]
        return float(np.mean(vals)) if vals else float("nan")

    def baseline_mean(self, metric: str = "iou") -> float:
        first = self.methods()[0] if self.rows else None
        vals = [getattr(r.base, metric) for r in self.rows if r.method == first]
        return float(np.mean(vals)) if vals else float("nan")

    def table(self) -> str:
        """Tab-separated per-sample rows followed by per-group and overall means."""
        head = "sample\tsize\tgroup\tmethod\tiou_base\tdice_base\tiou\tdice\td_iou\td_dice\tseconds"
        lines = [head]
        for r in self.rows:
            lines.append(
                f"{r.sample}\t{r.size:.4f}\t{group_label(r.group)}\t{r.method}\t"
                f"{r.base.iou:.3f}\t{r.base.dice:.3f}\t{r.result.iou:.3f}\t{r.result.dice:.3f}\t"
                f"{r.d_iou:.3f}\t{r.d_dice:.3f}\t{r.seconds:.2f}"
            )
        lines.append("")
        lines.append("group\tmethod\tn\tiou_base\tdice_base\tiou\tdice\td_iou\td_dice")
        for method in self.methods():
            sel = [r for r in self.rows if r.method == method]
            groups = sorted({r.group for r in sel})
            for g in groups + ["all"]:
                rs = sel if g == "all" else [r for r in sel if r.group == g]
                label = "all" if g == "all" else group_label(g)
                ib = np.mean([r.base.iou for r in rs])
                db = np.mean([r.base.dice for r in rs])
                ir = np.mean([r.result.iou for r in rs])
                dr = np.mean([r.result.dice for r in rs])
                lines.append(
                    f"{label}\t{method}\t{len(rs)}\t{ib:.3f}\t{db:.3f}\t{ir:.3f}\t{dr:.3f}\t{ir - ib:.3f}\t{dr - db:.3f}"
                )
        return "\n".join(lines) + "\n"


def dataset_threshold(score_maps, gts) -> float:
    """Single max-F1 threshold over all pixels of all samples."""
    t, _ = pipeline.best_f1_threshold(list(score_maps), list(gts))
    return t


def evaluate(
    samples,
    extractor,
    backend,
    prior,
    config: F2PADConfig,
    methods=("f2pad",),
    threshold: float | None = None,
    heatmap_dir=None,
) -> SuiteResult:
    """Run every method on ``samples`` (objects with ``name``, ``x``, ``gt``).

    The baseline mask is ``score >= threshold``; by default the threshold
    maximizes F1 over the whole set.  All methods start from that mask.
    """
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {sorted(METHODS)}")
    samples = list(samples)
    scores = [pipeline.pixel_scores(extractor, backend, s.x) for s in samples]
    if threshold is None:
        threshold = dataset_threshold(scores, [s.gt for s in samples])
    rows = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for smp, sc in zip(samples, scores):
            m0 = sc >= threshold
            base = iou_dice(m0, smp.gt)
            size = float(np.mean(smp.gt))
            if heatmap_dir is not None:
                imageio.write_heatmap(Path(heatmap_dir) / f"{smp.name}_scores.png", sc)
            for method in methods:
                cfg = config.replace(**METHODS[method])
                t0 = time.perf_counter()
                res = pipeline.run(smp.x, extractor, backend, prior, cfg, m0=m0)
                dt = time.perf_counter() - t0
                rows.append(
                    SampleRow(
                        smp.name, size, size_group(size), method, base, iou_dice(res.m_star, smp.gt), dt,
                        res.diagnostics.get("final_objective"),
                    )
                )
                if heatmap_dir is not None:
                    imageio.write_mask(Path(heatmap_dir) / f"{smp.name}_{method}_mask.png", res.m_star)
    return SuiteResult(rows, float(threshold))


@dataclass
class _DiskSample:
    name: str
    x: np.ndarray
    gt: np.ndarray


def load_samples(data_dir, size: int | None = None) -> tuple[list[_DiskSample], list[str]]:
    """Test samples listed in the manifest; missing files are reported, not fatal."""
    from .datasynth import read_manifest

    root = Path(data_dir)
    samples, missing = [], []
    for entry in read_manifest(root):
        if entry.get("split") != "test":
            continue
        img, msk = root / entry["image"], root / entry["mask"]
        absent = [str(p) for p in (img, msk) if not p.exists()]
        if absent:
            missing.extend(absent)
            continue
        name = Path(entry["image"]).stem
        samples.append(_DiskSample(name, imageio.read_image(img, size), imageio.read_mask(msk, size)))
    return samples, missing


def run_suite(data_dir, models, config: F2PADConfig, methods=("f2pad",), out_dir=None, size=None) -> SuiteResult:
    """Evaluate a dataset on disk; writes results.tsv, results.jsonl and heatmaps to ``out_dir``."""
    samples, missing = load_samples(data_dir, size)
    for path in missing:
        log.error("missing sample file: %s", path)
    heat = imageio.ensure_dir(Path(out_dir) / "heatmaps") if out_dir is not None else None
    if samples:
        result = evaluate(samples, models.extractor, models.backend, models.prior, config, methods, heatmap_dir=heat)
    else:
        result = SuiteResult([], float("nan"))
    result.missing = missing
    if out_dir is not None:
        out = imageio.ensure_dir(out_dir)
        (out / "results.tsv").write_text(result.table())
        with open(out / "results.jsonl", "w") as fh:
            fh.write(json.dumps({"threshold": result.threshold, "missing": missing}) + "\n")
            for r in result.rows:
                rec = asdict(r)
                rec.update(d_iou=r.d_iou, d_dice=r.d_dice)
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return result
