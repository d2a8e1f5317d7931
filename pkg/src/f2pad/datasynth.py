"""Cut-paste synthetic defects with exact ground truth.

x_gen = (1 - m) * n_orig + m * a_src, where a_src is a flat random colour
(or a patch of another normal image).  Every pasted pixel is pushed at
least ``contrast_min`` (normalized units) away from the original, so the
ground-truth mask is exactly the support of x_gen - n_orig.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import imageio

log = logging.getLogger(__name__)

MAX_RETRIES = 10


class SynthError(RuntimeError):
    pass


@dataclass
class SynthSpec:
    mask_source: np.ndarray | None = None  # binary; None draws a random blob
    resize_range: tuple[float, float] = (0.5, 1.5)
    color_mode: str = "random-color"  # random-color | patch
    contrast_min: float = 0.2
    seed: int = 0
    patch_source: np.ndarray | None = None  # normalized image for color_mode="patch"
    area_range: tuple[float, float] | None = None  # accepted defect area / image area; redraw outside

    def validate(self) -> None:
        lo, hi = self.resize_range
        if not (lo > 0 and hi >= lo):
            raise ValueError(f"resize_range must satisfy 0 < min <= max, got {self.resize_range}")
        if not self.contrast_min > 0:
            raise ValueError(f"contrast_min must be > 0, got {self.contrast_min}")
        if self.color_mode not in ("random-color", "patch"):
            raise ValueError(f"unknown color_mode {self.color_mode!r}")
        if self.color_mode == "patch" and self.patch_source is None:
            raise ValueError("color_mode='patch' needs patch_source")
        if self.area_range is not None and not 0 <= self.area_range[0] < self.area_range[1] <= 1:
            raise ValueError(f"area_range must satisfy 0 <= min < max <= 1, got {self.area_range}")


@dataclass
class SynthInfo:
    seed: int
    scale: float
    row: int
    col: int
    area: int
    color: list[float] | None
    adjusted: int  # pixels moved by the contrast rule
    retries: int

    def manifest_line(self, **extra) -> str:
        return json.dumps({**asdict(self), **extra}, sort_keys=True)


# ----------------------------------------------------------------- textures


PALETTES = {
    "tiles": np.array([[0.80, 0.72, 0.60], [0.55, 0.42, 0.30], [0.70, 0.62, 0.52], [0.35, 0.28, 0.22]]),
    "checker": np.array([[0.85, 0.85, 0.85], [0.25, 0.30, 0.35]]),
    "stripes": np.array([[0.30, 0.45, 0.60], [0.65, 0.70, 0.75], [0.45, 0.55, 0.50]]),
}


def texture(category: str, size: int, rng: np.random.Generator, noise: float = 0.02) -> np.ndarray:
    """Piecewise-constant normal image in [0, 1] RGB with small pixel noise.

    The layout is fixed per category; only the noise varies between draws.
    """
    if category not in PALETTES:
        raise ValueError(f"unknown category {category!r}; choose from {sorted(PALETTES)}")
    pal = PALETTES[category]
    ii, jj = np.mgrid[0:size, 0:size]
    if category == "tiles":
        cell = max(size // 4, 2)
        grout = max(size // 32, 1)
        label = ((ii // cell) + 2 * (jj // cell)) % 3
        label = np.where((ii % cell < grout) | (jj % cell < grout), 3, label)
    elif category == "checker":
        cell = max(size // 8, 1)
        label = ((ii // cell) + (jj // cell)) % 2
    else:
        band = max(size // 6, 1)
        label = ((ii + jj // 2) // band) % 3
    img = pal[label] + rng.normal(0.0, noise, (size, size, 3))
    return np.clip(img, 0.0, 1.0)


def random_blob(size: int, rng: np.random.Generator) -> np.ndarray:
    """Union of 1-3 random ellipses on a size x size canvas, centred."""
    ii, jj = np.mgrid[0:size, 0:size].astype(np.float64)
    c = (size - 1) / 2.0
    mask = np.zeros((size, size), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        ci = c + rng.uniform(-0.2, 0.2) * size
        cj = c + rng.uniform(-0.2, 0.2) * size
        ra = rng.uniform(0.1, 0.3) * size
        rb = rng.uniform(0.1, 0.3) * size
        th = rng.uniform(0, np.pi)
        u = (ii - ci) * np.cos(th) + (jj - cj) * np.sin(th)
        v = -(ii - ci) * np.sin(th) + (jj - cj) * np.cos(th)
        mask |= (u / ra) ** 2 + (v / rb) ** 2 <= 1.0
    return mask


def _resize_mask(mask: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return mask.copy()
    out = ndimage.zoom(mask.astype(np.float64), scale, order=1) >= 0.5
    return out


def _crop_to_support(mask: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return mask[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def enforce_contrast(
    x_gen: np.ndarray, n_orig: np.ndarray, mask: np.ndarray, contrast_min: float
) -> tuple[np.ndarray, int]:
    """Push masked pixels closer than ``contrast_min`` to the original away from it.

    First scale the difference by the factor that brings its norm to
    ``contrast_min``; if that leaves the valid range (or the difference is
    ~0), try the opposite direction, then a shift along each channel axis.
    """
    lo, hi = imageio.LOWER, imageio.UPPER
    out = x_gen.copy()
    diff = out - n_orig
    norm = np.sqrt(np.einsum("...c,...c->...", diff, diff))
    bad = mask & (norm < contrast_min)
    target = contrast_min * (1.0 + 1e-9)
    for i, j in zip(*np.nonzero(bad)):
        d = diff[i, j]
        r = norm[i, j]
        dirs = []
        if r > 1e-12:
            dirs += [d / r, -d / r]
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            dirs += [e, -e]
        for u in dirs:
            cand = n_orig[i, j] + target * u
            if np.all(cand >= lo) and np.all(cand <= hi):
                out[i, j] = cand
                break
        else:
            raise SynthError(f"cannot satisfy contrast at pixel ({i}, {j})")
    return out, int(bad.sum())


def generate(n_orig: np.ndarray, spec: SynthSpec) -> tuple[np.ndarray, np.ndarray, SynthInfo]:
    """Paste one defect into the normalized image ``n_orig``.

    Returns ``(x_gen, gt_mask, info)``.  An all-zero ``mask_source`` yields
    ``x_gen = n_orig`` and an empty mask.
    """
    spec.validate()
    n_orig = np.asarray(n_orig, dtype=np.float64)
    h, w = n_orig.shape[:2]
    rng = np.random.default_rng(spec.seed)
    if spec.mask_source is not None and not np.asarray(spec.mask_source).any():
        info = SynthInfo(spec.seed, 1.0, 0, 0, 0, None, 0, 0)
        return n_orig.copy(), np.zeros((h, w), dtype=bool), info

    placed = None
    for attempt in range(MAX_RETRIES + 1):
        src = (
            np.asarray(spec.mask_source, dtype=bool)
            if spec.mask_source is not None
            else random_blob(min(h, w) // 2, rng)
        )
        scale = float(rng.uniform(*spec.resize_range))
        m = _resize_mask(src, scale)
        if not m.any():
            continue
        m = _crop_to_support(m)
        mh, mw = m.shape
        if mh > h or mw > w:
            # does not fit: clip to the image
            m = m[:h, :w]
            mh, mw = m.shape
            if not m.any():
                continue
        row = int(rng.integers(0, h - mh + 1))
        col = int(rng.integers(0, w - mw + 1))
        cand = np.zeros((h, w), dtype=bool)
        cand[row : row + mh, col : col + mw] = m
        if spec.area_range is not None:
            frac = cand.mean()
            if not spec.area_range[0] <= frac <= spec.area_range[1]:
                continue
        placed = cand
        break
    if placed is None:
        raise SynthError(f"no acceptable defect mask in {MAX_RETRIES + 1} draws")

    if spec.color_mode == "random-color":
        color01 = rng.uniform(0.0, 1.0, 3)
        a_src = np.broadcast_to(imageio.normalize(color01), n_orig.shape)
        color = [float(v) for v in color01]
    else:
        a_src = np.asarray(spec.patch_source, dtype=np.float64)
        if a_src.shape != n_orig.shape:
            raise ValueError(f"patch_source shape {a_src.shape} != image shape {n_orig.shape}")
        color = None
    x_gen = np.where(placed[..., None], a_src, n_orig)
    x_gen, adjusted = enforce_contrast(x_gen, n_orig, placed, spec.contrast_min)
    info = SynthInfo(spec.seed, scale, row, col, int(placed.sum()), color, adjusted, attempt)
    return x_gen, placed, info


# ----------------------------------------------------------------- datasets


@dataclass
class SynthSample:
    name: str
    x: np.ndarray  # normalized defective image
    gt: np.ndarray  # exact defect mask
    clean: np.ndarray  # normalized image before pasting
    info: SynthInfo


def make_suite(
    category: str = "tiles",
    size: int = 64,
    n_train: int = 32,
    n_test: int = 16,
    seed: int = 0,
    contrast_min: float = 0.2,
    resize_range: tuple[float, float] = (0.5, 1.5),
    noise: float = 0.02,
    area_range: tuple[float, float] | None = None,
) -> tuple[list[np.ndarray], list[SynthSample]]:
    """In-memory suite: normalized normal training images and defective test samples.

    Every image and defect draws from its own child of ``SeedSequence(seed)``,
    so changing ``n_test`` does not alter the training images.
    """
    train_seq, test_seq = np.random.SeedSequence(seed).spawn(2)
    train = [
        imageio.normalize(texture(category, size, np.random.default_rng(child), noise))
        for child in train_seq.spawn(n_train)
    ]
    samples = []
    for i, child in enumerate(test_seq.spawn(n_test)):
        tex_seq, defect_seq = child.spawn(2)
        clean = imageio.normalize(texture(category, size, np.random.default_rng(tex_seq), noise))
        spec = SynthSpec(
            resize_range=resize_range,
            contrast_min=contrast_min,
            seed=int(defect_seq.generate_state(1)[0]),
            area_range=area_range,
        )
        x, gt, info = generate(clean, spec)
        samples.append(SynthSample(f"{i:04d}", x, gt, clean, info))
    return train, samples


def synth_dataset(out_dir, **suite_args) -> Path:
    """Write train/ (normal) and test/ (defective + mask) PNGs and manifest.jsonl.

    Keyword arguments are those of :func:`make_suite`.
    """
    root = imageio.ensure_dir(out_dir)
    imageio.ensure_dir(root / "train")
    imageio.ensure_dir(root / "test")
    train, samples = make_suite(**suite_args)
    lines = []
    for i, img in enumerate(train):
        name = f"train/{i:04d}.png"
        imageio.write_image(root / name, img)
        lines.append(json.dumps({"split": "train", "image": name}, sort_keys=True))
    for smp in samples:
        name, mname = f"test/{smp.name}.png", f"test/{smp.name}_mask.png"
        imageio.write_image(root / name, smp.x)
        imageio.write_mask(root / mname, smp.gt)
        lines.append(smp.info.manifest_line(split="test", image=name, mask=mname, size=float(smp.gt.mean())))
    (root / "manifest.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    return root


def read_manifest(root) -> list[dict]:
    path = Path(root) / "manifest.jsonl"
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
