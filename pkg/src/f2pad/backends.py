"""Normality models over concatenated feature maps and their pixel-differentiable losses.

Both backends expose the same surface:

* ``scores(stack)`` - per-location anomaly scores (ndarray, h1 x w1)
* ``loss(stack, cells=None)`` - Tensor scalar, sum of scores over ``cells``
  (boolean h1 x w1 mask; all cells when None), recorded on the active tape
* ``save(dir)`` / ``load(dir)``

A third backend (e.g. a normalizing flow) only needs the same three methods.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import f2td, kernels
from .extractor import FeatureStack
from .tensor import ShapeError, Tensor, custom_op

log = logging.getLogger(__name__)

DEFAULT_CANDIDATE_SIZE = 50


class DegenerateFeaturesError(ValueError):
    pass


def _features(stack) -> np.ndarray:
    if isinstance(stack, FeatureStack):
        return stack.concat.data
    if isinstance(stack, Tensor):
        return stack.data
    return np.asarray(stack, dtype=np.float64)


def _concat_tensor(stack) -> Tensor:
    if isinstance(stack, FeatureStack):
        return stack.concat
    return stack if isinstance(stack, Tensor) else Tensor(stack)


def _cell_mask(cells, shape) -> np.ndarray:
    if cells is None:
        return np.ones(shape, dtype=bool)
    cells = np.asarray(cells, dtype=bool)
    if cells.shape != shape:
        raise ShapeError(f"cell mask shape {cells.shape} != score map shape {shape}")
    return cells


# ----------------------------------------------------------------- Gaussian field


@dataclass
class GaussianField:
    """Per-location Gaussian; ``factor`` is W with precision = W^T W.

    W is the inverse of the lower Cholesky factor of the regularized
    covariance, so the squared Mahalanobis distance is ``||W (f - mu)||^2``.
    """

    mean: np.ndarray  # (h, w, c)
    factor: np.ndarray  # (h, w, c, c), lower triangular
    kind: str = field(default="gaussian", init=False)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.mean.shape

    def precision(self) -> np.ndarray:
        return np.einsum("hwki,hwkj->hwij", self.factor, self.factor)

    def _check(self, f: np.ndarray) -> None:
        if f.shape != self.mean.shape:
            raise ShapeError(f"feature shape {f.shape} != field shape {self.mean.shape}")

    def scores(self, stack) -> np.ndarray:
        f = _features(stack)
        self._check(f)
        z = np.einsum("hwij,hwj->hwi", self.factor, f - self.mean)
        return np.einsum("hwi,hwi->hw", z, z)

    def loss(self, stack, cells=None) -> Tensor:
        ft = _concat_tensor(stack)
        f = ft.data
        self._check(f)
        sel = _cell_mask(cells, f.shape[:2])
        mean, W = self._selected(sel)
        d = f[sel] - mean
        z = np.matmul(W, d[:, :, None])[:, :, 0]
        value = np.einsum("ni,ni->", z, z)

        def vjp(g):
            grad = np.zeros_like(f)
            grad[sel] = 2.0 * float(g) * np.matmul(z[:, None, :], W)[:, 0, :]
            return (grad,)

        return custom_op(np.array(value), (ft,), vjp)

    def _selected(self, sel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # the solver evaluates the same cell set every iteration; keep the gather
        key = sel.tobytes()
        cache = self.__dict__.get("_sel_cache")
        if cache is None or cache[0] != key:
            cache = (key, self.mean[sel], np.ascontiguousarray(self.factor[sel]))
            self.__dict__["_sel_cache"] = cache
        return cache[1], cache[2]

    def window(self, r0: int, r1: int, c0: int, c1: int) -> "GaussianField":
        """The field restricted to cells [r0, r1) x [c0, c1)."""
        return GaussianField(mean=self.mean[r0:r1, c0:c1], factor=self.factor[r0:r1, c0:c1])

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "backend.txt").write_text("gaussian\n")
        f2td.save_tensor(d / "gaussian_mean.f2td", self.mean)
        f2td.save_tensor(d / "gaussian_factor.f2td", self.factor)

    @classmethod
    def load(cls, directory) -> "GaussianField":
        d = Path(directory)
        return cls(
            mean=f2td.load_tensor(d / "gaussian_mean.f2td"),
            factor=f2td.load_tensor(d / "gaussian_factor.f2td"),
        )


def fit_gaussian_field(train_stacks, ridge: float | None = None, rel_ridge: float = 1e-3) -> GaussianField:
    """Per-location sample mean and covariance plus ``ridge * I``.

    With ``ridge=None`` the ridge is ``rel_ridge * trace(cov) / c`` per
    location (floored at 1e-12 so identical features stay invertible).
    """
    feats = np.stack([_features(s) for s in train_stacks])  # (N, h, w, c)
    if feats.shape[0] < 2:
        raise ValueError(f"need at least 2 training stacks, got {feats.shape[0]}")
    if ridge is not None and not ridge > 0:
        raise ValueError(f"ridge must be > 0, got {ridge}")
    n, h, w, c = feats.shape
    mean = feats.mean(axis=0)
    centred = feats - mean
    cov = np.einsum("nhwi,nhwj->hwij", centred, centred) / (n - 1)
    if ridge is None:
        tr = np.trace(cov, axis1=2, axis2=3) / c
        lam = np.maximum(rel_ridge * tr, 1e-12)
    else:
        lam = np.full((h, w), float(ridge))
    cov = cov + lam[..., None, None] * np.eye(c)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise DegenerateFeaturesError(f"covariance not positive definite after ridge: {exc}") from exc
    eye = np.broadcast_to(np.eye(c), cov.shape)
    factor = np.linalg.solve(chol, eye)
    # solve() leaves round-off above the diagonal
    factor = np.tril(factor)
    return GaussianField(mean=mean, factor=factor)


# ----------------------------------------------------------------- memory bank


@dataclass
class MemoryBank:
    features: np.ndarray  # (N, c)
    coreset_indices: np.ndarray  # (m,)
    candidate_sets: np.ndarray | None = None  # (h, w, k) indices into ``features``
    map_shape: tuple[int, int, int] | None = None
    kind: str = field(default="memory", init=False)

    @property
    def coreset(self) -> np.ndarray:
        return self.features[self.coreset_indices]

    def _check(self, f: np.ndarray) -> None:
        if f.shape[-1] != self.features.shape[1]:
            raise ShapeError(f"feature channels {f.shape[-1]} != bank channels {self.features.shape[1]}")

    def scores(self, stack) -> np.ndarray:
        """Exact nearest-coreset squared distance per location."""
        f = _features(stack)
        self._check(f)
        h, w, c = f.shape
        d2 = _sqdist(f.reshape(-1, c), self.coreset)
        return d2.min(axis=1).reshape(h, w)

    def candidate_scores(self, stack) -> tuple[np.ndarray, np.ndarray]:
        """(min squared distance over candidates, bank index of the minimizer)."""
        if self.candidate_sets is None:
            raise ValueError("candidate sets not built; call build_candidate_sets first")
        f = _features(stack)
        self._check(f)
        if f.shape[:2] != self.candidate_sets.shape[:2]:
            raise ShapeError(f"feature map {f.shape[:2]} != candidate grid {self.candidate_sets.shape[:2]}")
        cand = self.features[self.candidate_sets]  # (h, w, k, c)
        diff = f[:, :, None, :] - cand
        d2 = np.einsum("hwkc,hwkc->hwk", diff, diff)
        # sets are index-sorted, so the first minimum is the lowest bank index
        pos = np.argmin(d2, axis=2)
        best = np.take_along_axis(d2, pos[..., None], axis=2)[..., 0]
        idx = np.take_along_axis(self.candidate_sets, pos[..., None], axis=2)[..., 0]
        return best, idx

    def loss(self, stack, cells=None) -> Tensor:
        ft = _concat_tensor(stack)
        f = ft.data
        best, idx = self.candidate_scores(f)
        sel = _cell_mask(cells, f.shape[:2])
        value = best[sel].sum()
        nearest = self.features[idx]

        def vjp(g):
            grad = np.zeros_like(f)
            grad[sel] = 2.0 * float(g) * (f[sel] - nearest[sel])
            return (grad,)

        return custom_op(np.array(value), (ft,), vjp)

    def window(self, r0: int, r1: int, c0: int, c1: int) -> "MemoryBank":
        if self.candidate_sets is None:
            raise ValueError("candidate sets not built; call build_candidate_sets first")
        return MemoryBank(
            features=self.features,
            coreset_indices=self.coreset_indices,
            candidate_sets=self.candidate_sets[r0:r1, c0:c1],
        )

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "backend.txt").write_text("memory\n")
        f2td.save_tensor(d / "bank_features.f2td", self.features)
        f2td.save_index(d / "bank_coreset.f2ti", self.coreset_indices)
        if self.candidate_sets is not None:
            f2td.save_index(d / "bank_candidates.f2ti", self.candidate_sets)

    @classmethod
    def load(cls, directory) -> "MemoryBank":
        d = Path(directory)
        cand = d / "bank_candidates.f2ti"
        return cls(
            features=f2td.load_tensor(d / "bank_features.f2td"),
            coreset_indices=f2td.load_index(d / "bank_coreset.f2ti"),
            candidate_sets=f2td.load_index(cand) if cand.exists() else None,
        )


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact pairwise squared distances (no expansion trick, so zero stays zero)."""
    out = np.empty((a.shape[0], b.shape[0]))
    step = max(1, 2_000_000 // max(1, b.size))
    for s in range(0, a.shape[0], step):
        diff = a[s : s + step, None, :] - b[None, :, :]
        out[s : s + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def coreset_select(features, m: int, seed: int = 0, start: int | None = None) -> np.ndarray:
    """Greedy farthest-point selection of ``m`` rows of ``features``.

    Starts from a seeded random row (or ``start``); each next pick is the row
    with the largest distance to the current selection, lowest index on ties.
    """
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"coreset size must be in [1, {n}], got {m}")
    if start is None:
        start = int(np.random.default_rng(seed).integers(n))
    return kernels.farthest_point(feats, m, start)


def fit_memory_bank(train_stacks, coreset_fraction: float = 0.1, seed: int = 0) -> MemoryBank:
    feats = np.concatenate([_features(s).reshape(-1, _features(s).shape[-1]) for s in train_stacks])
    if feats.shape[0] < 1:
        raise ValueError("memory bank needs at least one feature")
    m = max(1, int(round(coreset_fraction * feats.shape[0])))
    idx = coreset_select(feats, m, seed=seed)
    return MemoryBank(features=feats, coreset_indices=idx)


def build_candidate_sets(bank: MemoryBank, stack0, size: int = DEFAULT_CANDIDATE_SIZE) -> np.ndarray:
    """For each location, bank indices of the ``size`` nearest coreset members.

    Each set is stored sorted by bank index so the loss breaks distance ties
    toward the lowest index.  Stored on the bank and returned.
    """
    if size < 1:
        raise ValueError(f"candidate set size must be >= 1, got {size}")
    m = len(bank.coreset_indices)
    if size > m:
        log.warning("candidate set size %d exceeds coreset size %d; clamping", size, m)
        size = m
    f = _features(stack0)
    h, w, c = f.shape
    d2 = _sqdist(f.reshape(-1, c), bank.coreset)
    order = np.argsort(d2, axis=1, kind="stable")[:, :size]
    cand = np.sort(bank.coreset_indices[order], axis=1).reshape(h, w, size)
    bank.candidate_sets = cand
    bank.map_shape = f.shape
    return cand


def load_backend(directory):
    kind = (Path(directory) / "backend.txt").read_text().strip()
    if kind == "gaussian":
        return GaussianField.load(directory)
    if kind == "memory":
        return MemoryBank.load(directory)
    raise ValueError(f"unknown backend kind {kind!r}")
