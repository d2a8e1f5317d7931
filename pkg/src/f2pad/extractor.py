"""Fixed, seeded multi-scale convolutional feature extractor.

The default network is three blocks of ``conv3x3 -> leaky ReLU -> 2x2 average
pool`` with channels 3 -> 16 -> 32 -> 64.  Feature maps are tapped after
blocks 1 and 2 and concatenated at the resolution of the first tap.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import f2td
from .tensor import (
    ShapeError,
    Tensor,
    avg_pool,
    concat_channels,
    conv2d,
    leaky_relu,
    upsample_nearest,
)


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One block: conv (kh, kw, cin, cout) with stride/pad, activation, then pooling."""

    kernel: tuple[int, int, int, int]
    stride: int = 1
    pad: int = 1
    activation: str = "leaky_relu"
    slope: float = 0.1
    pool: int = 2


@dataclass(frozen=True)
class ExtractorSpec:
    layers: tuple[LayerSpec, ...] = field(
        default_factory=lambda: (
            LayerSpec((3, 3, 3, 16)),
            LayerSpec((3, 3, 16, 32)),
            LayerSpec((3, 3, 32, 64)),
        )
    )
    tap_points: tuple[int, ...] = (0, 1)
    seed: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExtractorSpec":
        raw = json.loads(text)
        layers = tuple(
            LayerSpec(**{**ly, "kernel": tuple(ly["kernel"])}) for ly in raw["layers"]
        )
        return cls(layers=layers, tap_points=tuple(raw["tap_points"]), seed=int(raw["seed"]))

    def validate(self) -> None:
        problems = []
        if not self.layers:
            problems.append("at least one layer is required")
        if not self.tap_points:
            problems.append("at least one tap point is required")
        if list(self.tap_points) != sorted(set(self.tap_points)):
            problems.append(f"tap_points must be strictly increasing, got {self.tap_points}")
        if any(t < 0 or t >= len(self.layers) for t in self.tap_points):
            problems.append(f"tap_points out of range for {len(self.layers)} layers")
        cin = None
        for idx, ly in enumerate(self.layers):
            kh, kw, lcin, _ = ly.kernel
            if kh % 2 == 0 or kw % 2 == 0:
                problems.append(f"layer {idx}: kernel extents must be odd")
            if ly.stride < 1 or ly.pad < 0 or ly.pool < 1:
                problems.append(f"layer {idx}: stride/pool must be >= 1 and pad >= 0")
            if ly.activation not in ("leaky_relu", "none"):
                problems.append(f"layer {idx}: unknown activation {ly.activation!r}")
            if not 0.0 < ly.slope < 1.0:
                problems.append(f"layer {idx}: leaky slope must be in (0, 1)")
            if cin is not None and lcin != cin:
                problems.append(f"layer {idx}: cin={lcin} does not match previous cout={cin}")
            cin = ly.kernel[3]
        if problems:
            raise SpecError("; ".join(problems))

    def output_sizes(self, h: int, w: int) -> list[tuple[int, int]]:
        """Spatial size after each block for an h x w input."""
        sizes = []
        for ly in self.layers:
            kh, kw = ly.kernel[:2]
            h = (h + 2 * ly.pad - kh) // ly.stride + 1
            w = (w + 2 * ly.pad - kw) // ly.stride + 1
            h, w = (h - ly.pool) // ly.pool + 1, (w - ly.pool) // ly.pool + 1
            sizes.append((h, w))
        return sizes

    def check_input(self, h: int, w: int) -> None:
        """Input dims must divide evenly through every stride so taps nest."""
        total = 1
        for ly in self.layers[: self.tap_points[-1] + 1]:
            total *= ly.stride * ly.pool
        if h % total or w % total:
            raise ShapeError(f"image {h}x{w} not divisible by total stride {total}")
        sizes = self.output_sizes(h, w)
        h1, w1 = sizes[self.tap_points[0]]
        for t in self.tap_points[1:]:
            ht, wt = sizes[t]
            if ht < 1 or wt < 1 or h1 % ht or w1 % wt:
                raise SpecError(
                    f"tap {t} size {ht}x{wt} does not divide first tap size {h1}x{w1}"
                )


@dataclass
class FeatureStack:
    maps: list[Tensor]
    concat: Tensor

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.concat.shape


class Extractor:
    """Immutable extractor; weights are a pure function of ``spec.seed``."""

    def __init__(self, spec: ExtractorSpec, weights: list[np.ndarray]):
        self.spec = spec
        self.weights = [Tensor(wt) for wt in weights]

    def extract(self, image) -> FeatureStack:
        """Differentiable w.r.t. ``image`` when it is a Tensor requiring grad."""
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim != 3:
            raise ShapeError(f"image must be (h, w, c), got rank {x.ndim}")
        if x.shape[2] != self.spec.layers[0].kernel[2]:
            raise ShapeError(
                f"image channels {x.shape[2]} != extractor input channels {self.spec.layers[0].kernel[2]}"
            )
        self.spec.check_input(x.shape[0], x.shape[1])
        maps = []
        last = self.spec.tap_points[-1]
        taps = set(self.spec.tap_points)
        h = x
        for idx, (ly, wt) in enumerate(zip(self.spec.layers, self.weights)):
            h = conv2d(h, wt, stride=ly.stride, pad=ly.pad)
            if ly.activation == "leaky_relu":
                h = leaky_relu(h, ly.slope)
            if ly.pool > 1:
                h = avg_pool(h, ly.pool, ly.pool)
            if idx in taps:
                maps.append(h)
            if idx == last:
                break
        h1, w1 = maps[0].shape[:2]
        parts = [maps[0]] + [
            m if m.shape[:2] == (h1, w1) else upsample_nearest(m, h1, w1) for m in maps[1:]
        ]
        concat = parts[0] if len(parts) == 1 else concat_channels(parts)
        return FeatureStack(maps=maps, concat=concat)

    def receptive_fields(self, h: int, w: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per concatenated-map cell, the pixel intervals each tap sees.

        Returns one ``(rows, cols)`` pair per tap, each an array of shape
        (h1, 2) / (w1, 2) holding inclusive [lo, hi] pixel bounds clipped to
        the image, indexed by the concat cell row/col.
        """
        self.spec.check_input(h, w)
        out = []
        sizes = self.spec.output_sizes(h, w)
        h1, w1 = sizes[self.spec.tap_points[0]]
        for t in self.spec.tap_points:
            rows = _axis_field(self.spec.layers[: t + 1], 0, sizes[t][0], h)
            cols = _axis_field(self.spec.layers[: t + 1], 1, sizes[t][1], w)
            rr = h1 // sizes[t][0]
            rc = w1 // sizes[t][1]
            out.append((rows[np.arange(h1) // rr], cols[np.arange(w1) // rc]))
        return out

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "extractor.json").write_text(self.spec.to_json() + "\n")
        for idx, wt in enumerate(self.weights):
            f2td.save_tensor(d / f"extractor_w{idx}.f2td", wt.data)

    @classmethod
    def load(cls, directory) -> "Extractor":
        d = Path(directory)
        spec = ExtractorSpec.from_json((d / "extractor.json").read_text())
        spec.validate()
        weights = [f2td.load_tensor(d / f"extractor_w{i}.f2td") for i in range(len(spec.layers))]
        for i, (wt, ly) in enumerate(zip(weights, spec.layers)):
            if tuple(wt.shape) != tuple(ly.kernel):
                raise SpecError(f"weight {i} shape {wt.shape} != spec {ly.kernel}")
        return cls(spec, weights)


def _axis_field(layers, axis: int, n_out: int, n_in: int) -> np.ndarray:
    """Inclusive input-pixel interval for each output index along one axis."""
    lo = np.arange(n_out)
    hi = np.arange(n_out)
    for ly in reversed(layers):
        k = ly.kernel[axis]
        # pooling: output o covers [o*p, o*p + p - 1]
        lo, hi = lo * ly.pool, hi * ly.pool + ly.pool - 1
        # conv: output o covers [o*s - pad, o*s - pad + k - 1]
        lo, hi = lo * ly.stride - ly.pad, hi * ly.stride - ly.pad + k - 1
    return np.stack([np.clip(lo, 0, n_in - 1), np.clip(hi, 0, n_in - 1)], axis=1)


def build_extractor(spec: ExtractorSpec | None = None) -> Extractor:
    """Weights drawn from uniform(-s, s), s = 1/sqrt(fan_in), seeded."""
    spec = spec or ExtractorSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    weights = []
    for ly in spec.layers:
        kh, kw, cin, cout = ly.kernel
        s = 1.0 / np.sqrt(kh * kw * cin)
        weights.append(rng.uniform(-s, s, size=ly.kernel))
    return Extractor(spec, weights)
