"""Dense HWC tensors with tape-based reverse-mode differentiation.

Only the op set needed to push feature-level losses back to pixels is
provided: 2-D convolution, average pooling, leaky ReLU, nearest upsampling,
channel concatenation and a few elementwise helpers.  Backends add fused
primitives through :func:`custom_op`.

Usage::

    x = Tensor(image, requires_grad=True)
    with Tape() as tape:
        y = conv2d(x, w, stride=1, pad=1)
        loss = sum_all(y)
    grads = backward(tape, loss)
    grads[x]   # ndarray shaped like x
"""
from __future__ import annotations

import os
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "Tensor",
    "Tape",
    "backward",
    "custom_op",
    "conv2d",
    "avg_pool",
    "leaky_relu",
    "upsample_nearest",
    "concat_channels",
    "add",
    "mul",
    "scale",
    "sum_all",
    "set_debug",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the bad dimension."""


class NonFiniteError(FloatingPointError):
    pass


_DEBUG = os.environ.get("F2PAD_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Check every op output for NaN/Inf (slow)."""
    global _DEBUG
    _DEBUG = bool(flag)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Immutable double-precision array node.

    Construction validates finiteness.  Op outputs skip the check unless
    debug mode is on.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, _check: bool = True):
        arr = np.array(data, dtype=np.float64, copy=True) if _check else data
        if _check:
            _check_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(v)


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives.

    Each thread has its own stack of active tapes, so independent images can
    be differentiated concurrently.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)


def _emit(data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    if not isinstance(data, np.ndarray):  # 0-d arithmetic returns numpy scalars
        data = np.asarray(data, dtype=np.float64)
    out = Tensor(data, requires_grad=needs, _check=False)
    if _DEBUG:
        _check_finite(data, "op output")
    tape = _active_tape()
    if needs and tape is not None:
        tape.records.append(_Record(out, tuple(inputs), vjp))
    return out


def custom_op(
    data: np.ndarray,
    inputs: Sequence[Tensor],
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Record a user-defined primitive.

    ``vjp(grad_out)`` must return one gradient (or None) per input.
    """
    return _emit(np.asarray(data, dtype=np.float64), inputs, vjp)


def backward(tape: Tape, output: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``output`` w.r.t. every leaf requiring grad.

    Leaves that the output does not depend on get a zero gradient.
    """
    if output.data.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
    produced = {id(r.out) for r in tape.records}
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    leaves: dict[int, Tensor] = {}
    for rec in tape.records:
        for t in rec.inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.vjp(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = np.array(gi, dtype=np.float64)
    out = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        out[leaf] = g if g is not None else np.zeros_like(leaf.data)
    if output.requires_grad and id(output) not in produced:
        # output is itself a leaf
        out[output] = np.ones_like(output.data)
    return out


# ---------------------------------------------------------------- conv / pool


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an (h, w, cin) input with a (kh, kw, cin, cout) kernel."""
    x = _as_tensor(x)
    kernel = _as_tensor(kernel)
    if x.ndim != 3:
        raise ShapeError(f"conv2d input must be (h, w, cin), got rank {x.ndim}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d kernel must be (kh, kw, cin, cout), got rank {kernel.ndim}")
    h, w, cin = x.shape
    kh, kw, kcin, cout = kernel.shape
    if kcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input cin={cin}, kernel cin={kcin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel extents must be odd, got kh={kh}, kw={kw}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d pad must be >= 0, got {pad}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if ho < 1:
        raise ShapeError(f"conv2d height too small: h={h}, kh={kh}, pad={pad}")
    if wo < 1:
        raise ShapeError(f"conv2d width too small: w={w}, kw={kw}, pad={pad}")

    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    # (ho, wo, cin, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride][:ho, :wo]
    kt = kernel.data.transpose(2, 0, 1, 3)  # (cin, kh, kw, cout)
    out = np.tensordot(win, kt, axes=([2, 3, 4], [0, 1, 2]))

    kdata = kernel.data

    def vjp(g):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.tensordot(win, g, axes=([0, 1], [0, 1])).transpose(1, 2, 0, 3)
        if x.requires_grad:
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[i : i + stride * ho : stride, j : j + stride * wo : stride] += g @ kdata[i, j].T
            gx = gxp[pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gk

    return _emit(out, (x, kernel), vjp)


def avg_pool(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Mean over k x k windows (no padding)."""
    x = _as_tensor(x)
    stride = k if stride is None else stride
    if k < 1:
        raise ShapeError(f"avg_pool window must be >= 1, got {k}")
    if stride < 1:
        raise ShapeError(f"avg_pool stride must be >= 1, got {stride}")
    h, w, c = x.shape
    if k > h:
        raise ShapeError(f"avg_pool window {k} exceeds input height {h}")
    if k > w:
        raise ShapeError(f"avg_pool window {k} exceeds input width {w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(0, 1))[::stride, ::stride][:ho, :wo]
    out = win.mean(axis=(3, 4))

    def vjp(g):
        gx = np.zeros(x.shape)
        gs = g / (k * k)
        for i in range(k):
            for j in range(k):
                gx[i : i + stride * ho : stride, j : j + stride * wo : stride] += gs
        return (gx,)

    return _emit(out, (x,), vjp)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    x = _as_tensor(x)
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)

    def vjp(g):
        return (np.where(pos, g, slope * g),)

    return _emit(out, (x,), vjp)


def upsample_nearest(x: Tensor, target_h: int, target_w: int) -> Tensor:
    x = _as_tensor(x)
    h, w = x.shape[:2]
    if target_h < h or target_h % h:
        raise ShapeError(f"upsample target height {target_h} is not a multiple of {h}")
    if target_w < w or target_w % w:
        raise ShapeError(f"upsample target width {target_w} is not a multiple of {w}")
    rh, rw = target_h // h, target_w // w
    out = np.repeat(np.repeat(x.data, rh, axis=0), rw, axis=1)

    def vjp(g):
        rest = g.shape[2:]
        return (g.reshape(h, rh, w, rw, *rest).sum(axis=(1, 3)),)

    return _emit(out, (x,), vjp)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    base = tensors[0].shape[:2]
    for idx, t in enumerate(tensors[1:], start=1):
        if t.shape[:2] != base:
            raise ShapeError(f"concat spatial mismatch at input {idx}: {t.shape[:2]} vs {base}")
    sizes = [t.shape[2] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=2)
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[..., bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _emit(out, tensors, vjp)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, factor: float) -> Tensor:
    a = _as_tensor(a)
    return _emit(a.data * factor, (a,), lambda g: (g * factor,))


def sum_all(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _emit(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))
