"""Pure numpy versions of the hot loops.

Used when the compiled extension is missing or F2PAD_PURE_PYTHON=1.  Loop
order and accumulation order follow the compiled code so both agree to
rounding of the exponential.
"""
from __future__ import annotations

import numpy as np


def _offsets(ks: int):
    return [(di, dj) for di in range(-ks, ks + 1) for dj in range(-ks, ks + 1)]


def _shift_slices(n: int, d: int):
    """Slices (dst, src) so that dst[i] pairs with src[i + d] inside [0, n)."""
    if d >= 0:
        return slice(0, n - d), slice(d, n)
    return slice(-d, n), slice(0, n + d)


def sharing_weights(x: np.ndarray, ks: int, sigma0: float, sigma1: float) -> np.ndarray:
    h, w, _ = x.shape
    offs = _offsets(ks)
    out = np.zeros((h, w, len(offs)))
    for k, (di, dj) in enumerate(offs):
        ri, rs = _shift_slices(h, di)
        ci, cs = _shift_slices(w, dj)
        diff = x[rs, cs] - x[ri, ci]
        col = (diff[..., 0] * diff[..., 0]) if x.shape[2] else 0.0
        for c in range(1, x.shape[2]):
            col = col + diff[..., c] * diff[..., c]
        out[ri, ci, k] = np.exp(-(di * di + dj * dj) / sigma0) * np.exp(-col / sigma1)
    total = np.zeros((h, w))
    for k in range(len(offs)):
        total += out[:, :, k]
    out /= total[:, :, None]
    return out


def share(weights: np.ndarray, grad: np.ndarray, ks: int) -> np.ndarray:
    h, w, _ = grad.shape
    g = np.zeros_like(grad)
    for k, (di, dj) in enumerate(_offsets(ks)):
        ri, rs = _shift_slices(h, di)
        ci, cs = _shift_slices(w, dj)
        g[ri, ci] += weights[ri, ci, k, None] * grad[rs, cs]
    return g


def jacobi_inpaint(x: np.ndarray, mask: np.ndarray, tol: float, max_iter: int):
    """Harmonic fill of ``mask`` pixels; returns (image, iterations)."""
    n = np.array(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return n, 0
    h, w, _ = n.shape
    known = ~mask
    n[mask] = n[known].mean(axis=0)
    # neighbour counts per pixel (image border reduces them)
    cnt = np.zeros((h, w))
    cnt[1:, :] += 1
    cnt[:-1, :] += 1
    cnt[:, 1:] += 1
    cnt[:, :-1] += 1
    it = 0
    while it < max_iter:
        acc = np.zeros_like(n)
        acc[1:, :] += n[:-1, :]
        acc[:-1, :] += n[1:, :]
        acc[:, 1:] += n[:, :-1]
        acc[:, :-1] += n[:, 1:]
        new = acc[mask] / cnt[mask][:, None]
        delta = np.max(np.abs(new - n[mask]))
        n[mask] = new
        it += 1
        if delta < tol:
            break
    return n, it


def farthest_point(features: np.ndarray, m: int, start: int) -> np.ndarray:
    feats = np.asarray(features, dtype=np.float64)
    sel = np.empty(m, dtype=np.int64)
    sel[0] = start
    d = feats - feats[start]
    mind = np.einsum("ij,ij->i", d, d)
    # selected points are pinned at -inf so duplicates never get re-picked
    mind[start] = -np.inf
    for t in range(1, m):
        nxt = int(np.argmax(mind))
        sel[t] = nxt
        d = feats - feats[nxt]
        np.minimum(mind, np.einsum("ij,ij->i", d, d), out=mind)
        mind[nxt] = -np.inf
    return sel
