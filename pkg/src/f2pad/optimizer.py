"""Gradient-sharing Adan solver over the pixel field.

Each iteration replaces a pixel's gradient by a bilateral-weighted average
of its neighbours' gradients, clips it, scales the step per channel by the
inverse size of the current anomalous part, and applies the Adan update.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels

log = logging.getLogger(__name__)

# Adan reference defaults (betas as EMA decay factors, as in the reference code)
ADAN_BETAS = (0.98, 0.92, 0.99)
ADAN_EPS = 1e-8
ADAN_LR = 1e-3


class SolverError(RuntimeError):
    pass


@dataclass
class SharingKernel:
    """Per-pixel normalized weights over the (2ks+1)^2 offsets, row-major offset order."""

    weights: np.ndarray  # (h, w, (2ks+1)^2)
    ks: int
    sigma0: float
    sigma1: float

    def offset_index(self, di: int, dj: int) -> int:
        side = 2 * self.ks + 1
        return (di + self.ks) * side + (dj + self.ks)


def build_sharing_kernel(x: np.ndarray, ks: int = 5, sigma0: float = 1.1, sigma1: float = 3.0) -> SharingKernel:
    if ks < 0:
        raise ValueError(f"ks must be >= 0, got {ks}")
    if not (sigma0 > 0 and sigma1 > 0):
        raise ValueError("sigma0 and sigma1 must be > 0")
    x = np.ascontiguousarray(x, dtype=np.float64)
    if ks == 0:
        w = np.ones(x.shape[:2] + (1,))
    else:
        w = kernels.sharing_weights(x, ks, sigma0, sigma1)
    return SharingKernel(weights=w, ks=ks, sigma0=sigma0, sigma1=sigma1)


def share_gradients(kernel: SharingKernel, grad: np.ndarray, clip: float | None = 0.03) -> np.ndarray:
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if grad.shape[:2] != kernel.weights.shape[:2]:
        raise ValueError(f"gradient field {grad.shape[:2]} != kernel grid {kernel.weights.shape[:2]}")
    g = grad.copy() if kernel.ks == 0 else kernels.share(kernel.weights, grad, kernel.ks)
    if clip is not None:
        np.clip(g, -clip, clip, out=g)
    return g


def adaptive_steps(x: np.ndarray, n: np.ndarray, gamma0: float = 1.0, floor: float = 0.01) -> np.ndarray:
    """gamma = gamma0 / max(|x - n|, floor), per pixel and channel."""
    if not gamma0 > 0:
        raise ValueError(f"gamma0 must be > 0, got {gamma0}")
    if not floor > 0:
        raise ValueError(f"floor must be > 0, got {floor}")
    return gamma0 / np.maximum(np.abs(np.asarray(x) - np.asarray(n)), floor)


@dataclass
class SolverState:
    n: np.ndarray
    exp_avg: np.ndarray = None
    exp_avg_diff: np.ndarray = None
    exp_avg_sq: np.ndarray = None
    prev_grad: np.ndarray = None
    step: int = 0
    losses: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.n = np.array(self.n, dtype=np.float64)
        z = np.zeros_like(self.n)
        for name in ("exp_avg", "exp_avg_diff", "exp_avg_sq", "prev_grad"):
            if getattr(self, name) is None:
                setattr(self, name, z.copy())


def adan_step(
    state: SolverState,
    g: np.ndarray,
    gamma: np.ndarray | float,
    lr: float = ADAN_LR,
    betas: tuple[float, float, float] = ADAN_BETAS,
    eps: float = ADAN_EPS,
    active: np.ndarray | None = None,
) -> SolverState:
    """One Adan update of ``state.n`` in place, per-element rate ``lr * gamma``.

    ``active`` (h x w bool) limits which pixels are written; others keep
    their exact values.
    """
    b1, b2, b3 = betas
    state.step += 1
    k = state.step
    diff = g - state.prev_grad
    state.exp_avg *= b1
    state.exp_avg += (1 - b1) * g
    state.exp_avg_diff *= b2
    state.exp_avg_diff += (1 - b2) * diff
    u = g + b2 * diff
    state.exp_avg_sq *= b3
    state.exp_avg_sq += (1 - b3) * u * u
    bc1 = 1 - b1**k
    bc2 = 1 - b2**k
    bc3 = 1 - b3**k
    denom = np.sqrt(state.exp_avg_sq) / np.sqrt(bc3) + eps
    update = (state.exp_avg / bc1 + b2 * state.exp_avg_diff / bc2) / denom
    delta = lr * np.asarray(gamma) * update
    if not np.all(np.isfinite(delta)):
        raise SolverError(f"non-finite update at step {k}")
    state.prev_grad = np.array(g, dtype=np.float64)
    if active is None:
        state.n -= delta
    else:
        state.n[active] -= delta[active]
    return state


def _cropped_sharing(kernel: SharingKernel, active: np.ndarray | None, clip: float | None):
    """Sharing restricted to the active pixels' bounding box plus a ks margin.

    Only directions at active pixels are ever applied, and every neighbour
    they read lies inside the padded box, so those values are exact.
    """
    if active is None or not np.any(active):
        return lambda grad: share_gradients(kernel, grad, clip)
    h, w = kernel.weights.shape[:2]
    rows = np.flatnonzero(np.any(active, axis=1))
    cols = np.flatnonzero(np.any(active, axis=0))
    r0, r1 = max(rows[0] - kernel.ks, 0), min(rows[-1] + kernel.ks + 1, h)
    c0, c1 = max(cols[0] - kernel.ks, 0), min(cols[-1] + kernel.ks + 1, w)
    if (r0, r1, c0, c1) == (0, h, 0, w):
        return lambda grad: share_gradients(kernel, grad, clip)
    sub = SharingKernel(
        np.ascontiguousarray(kernel.weights[r0:r1, c0:c1]), kernel.ks, kernel.sigma0, kernel.sigma1
    )

    def share(grad):
        out = np.zeros_like(grad, dtype=np.float64)
        out[r0:r1, c0:c1] = share_gradients(sub, grad[r0:r1, c0:c1], clip)
        return out

    return share


@dataclass
class SolveResult:
    n: np.ndarray
    losses: list[float]
    iterations: int
    converged: bool


def solve(
    objective: Callable[[np.ndarray], tuple[float, np.ndarray]],
    n0: np.ndarray,
    kernel: SharingKernel,
    x: np.ndarray,
    *,
    gamma0: float = 1.0,
    step_floor: float = 0.01,
    lr: float = ADAN_LR,
    clip: float | None = 0.03,
    loss_threshold: float = 0.05,
    max_iter: int = 1200,
    active: np.ndarray | None = None,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
    loss_log=None,
) -> SolveResult:
    """Minimize ``objective`` from ``n0``.

    Stops once the loss changes by less than ``loss_threshold`` between
    consecutive evaluations, or after ``max_iter`` updates.  ``bounds`` is a
    per-channel (lo, hi) pair the iterate is clamped to after each step.
    ``loss_log`` receives ``"<iteration>\\t<loss>\\n"`` lines.
    """
    state = SolverState(n0)
    x = np.asarray(x, dtype=np.float64)
    share_fn = _cropped_sharing(kernel, active, clip)
    converged = False
    it = 0
    while True:
        try:
            loss, grad = objective(state.n)
        except Exception as exc:
            raise SolverError(f"objective failed at iteration {it}: {exc}") from exc
        loss = float(loss)
        if not np.isfinite(loss):
            raise SolverError(f"non-finite loss at iteration {it}")
        state.losses.append(loss)
        if loss_log is not None:
            loss_log.write(f"{it}\t{loss:.17g}\n")
        if len(state.losses) > 1 and abs(state.losses[-2] - loss) < loss_threshold:
            converged = True
            break
        if it >= max_iter:
            break
        g = share_fn(grad)
        gamma = adaptive_steps(x, state.n, gamma0, step_floor)
        try:
            adan_step(state, g, gamma, lr=lr, active=active)
        except SolverError as exc:
            raise SolverError(f"{exc} (iteration {it})") from exc
        if bounds is not None:
            lo, hi = bounds
            clamped = np.clip(state.n, lo, hi)
            if active is None:
                state.n = clamped
            else:
                state.n[active] = clamped[active]
        it += 1
    return SolveResult(n=state.n, losses=state.losses, iterations=it, converged=converged)
