"""PNG I/O and channelwise normalization (ImageNet mean/std convention)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

MEAN = np.array([0.485, 0.456, 0.406])
STD = np.array([0.229, 0.224, 0.225])

# valid normalized range per channel: images of [0, 1] pixels
LOWER = (0.0 - MEAN) / STD
UPPER = (1.0 - MEAN) / STD


def normalize(rgb01: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb01, dtype=np.float64) - MEAN) / STD


def denormalize(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) * STD + MEAN


def to_uint8(rgb01: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(rgb01) * 255.0), 0, 255).astype(np.uint8)


def read_image(path, size: int | None = None) -> np.ndarray:
    """8-bit RGB PNG -> normalized (h, w, 3) float64, optionally resized square."""
    img = Image.open(path).convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    return normalize(np.asarray(img, dtype=np.float64) / 255.0)


def write_image(path, x: np.ndarray) -> None:
    """Normalized (h, w, 3) image -> 8-bit RGB PNG."""
    Image.fromarray(to_uint8(denormalize(x))).save(path)


def read_mask(path, size: int | None = None) -> np.ndarray:
    img = Image.open(path).convert("L")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.NEAREST)
    return np.asarray(img) > 127


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def write_heatmap(path, scores: np.ndarray) -> None:
    """Scores rescaled to [0, 255] with a simple blue-to-red ramp."""
    s = np.asarray(scores, dtype=np.float64)
    lo, hi = float(s.min()), float(s.max())
    t = (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)
    rgb = np.stack([t, 1.0 - np.abs(2.0 * t - 1.0), 1.0 - t], axis=-1)
    Image.fromarray(to_uint8(rgb)).save(path)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
