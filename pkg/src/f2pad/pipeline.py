"""End-to-end decomposition of an image into a defect-free part and a sparse anomaly.

Stages: baseline mask from backend scores -> dilation -> harmonic
inpainting -> active region -> penalized regression solve -> mask
extraction -> 3x3 opening -> re-estimation without the sparsity term.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import imageio, kernels
from .backends import MemoryBank, build_candidate_sets
from .config import F2PADConfig
from .extractor import Extractor
from .optimizer import build_sharing_kernel, solve
from .regularizers import MOGPixelPrior, log_penalty, mog_prior_energy, tv_energy
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Decomposition:
    """x = n + a, with a always derived as x - n."""

    x: np.ndarray
    n: np.ndarray

    @property
    def a(self) -> np.ndarray:
        return self.x - self.n


# ----------------------------------------------------------------- score maps


def upsample_bilinear(scores: np.ndarray, h: int, w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize (the usual align_corners=False convention)."""
    s = np.asarray(scores, dtype=np.float64)
    sh, sw = s.shape

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        i0 = np.floor(c).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, c - i0

    r0, r1, fr = coords(h, sh)
    c0, c1, fc = coords(w, sw)
    top = s[r0][:, c0] * (1 - fc) + s[r0][:, c1] * fc
    bot = s[r1][:, c0] * (1 - fc) + s[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def pixel_scores(extractor: Extractor, backend, x: np.ndarray) -> np.ndarray:
    """Backend per-location scores interpolated to the pixel grid."""
    stack = extractor.extract(x)
    return upsample_bilinear(backend.scores(stack), x.shape[0], x.shape[1])


def best_f1_threshold(scores, gt) -> tuple[float, float]:
    """Threshold t maximizing F1 of ``scores >= t`` against ``gt``.

    ``scores``/``gt`` may be single maps or sequences of maps (pooled).
    Ties in F1 go to the highest threshold.
    """
    if isinstance(scores, (list, tuple)):
        s = np.concatenate([np.ravel(v) for v in scores])
        g = np.concatenate([np.ravel(v) for v in gt]).astype(bool)
    else:
        s = np.ravel(scores)
        g = np.ravel(gt).astype(bool)
    order = np.argsort(-s, kind="stable")
    ss, gs = s[order], g[order]
    tp = np.cumsum(gs)
    pred = np.arange(1, len(s) + 1)
    # only cut where the score changes
    last = np.r_[ss[1:] != ss[:-1], True]
    f1 = np.where(last, 2.0 * tp / (pred + g.sum()), -1.0)
    k = int(np.argmax(f1))
    return float(ss[k]), float(f1[k])


def initial_mask(
    score_map: np.ndarray,
    mode: str = "percentile",
    q: float = 98.0,
    threshold: float | None = None,
    gt: np.ndarray | None = None,
) -> np.ndarray:
    """Binary baseline mask from pixel-level scores.

    * ``percentile`` - the top (100 - q)% pixels, ties by row-major index
    * ``threshold`` - ``score >= threshold``
    * ``max-f1`` - threshold maximizing F1 against ``gt`` (evaluation only)
    """
    s = np.asarray(score_map, dtype=np.float64)
    if mode == "percentile":
        k = int(round((100.0 - q) / 100.0 * s.size))
        mask = np.zeros(s.size, dtype=bool)
        if k > 0:
            mask[np.argsort(-s.ravel(), kind="stable")[:k]] = True
        mask = mask.reshape(s.shape)
    elif mode == "threshold":
        if threshold is None:
            raise ValueError("threshold mode needs a threshold")
        mask = s >= threshold
    elif mode == "max-f1":
        if gt is None:
            raise ValueError("max-f1 mode needs a ground-truth mask")
        t, _ = best_f1_threshold(s, gt)
        mask = s >= t
    else:
        raise ValueError(f"unknown initial-mask mode {mode!r}")
    if not mask.any():
        log.warning("initial mask is empty")
    return mask


# ----------------------------------------------------------------- morphology


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    if radius < 0:
        raise ValueError(f"radius must be >= 0, got {radius}")
    mask = np.asarray(mask, dtype=bool)
    if radius == 0 or not mask.any():
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((2 * radius + 1,) * 2, dtype=bool))


def morph_open(mask: np.ndarray, k: int = 3) -> np.ndarray:
    if k < 1 or k % 2 == 0:
        raise ValueError(f"structuring element size must be odd, got {k}")
    mask = np.asarray(mask, dtype=bool)
    if k == 1:
        return mask.copy()
    return ndimage.binary_opening(mask, structure=np.ones((k, k), dtype=bool))


def extract_mask(a: np.ndarray, tau: float = 0.1) -> np.ndarray:
    """m = 1 where the per-pixel norm of the anomalous part exceeds ``tau``."""
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    a = np.asarray(a, dtype=np.float64)
    return np.sqrt(np.einsum("...c,...c->...", a, a)) > tau


# ----------------------------------------------------------------- initialization


def inpaint_init(x: np.ndarray, m0: np.ndarray, tol: float = 1e-6, max_iter: int = 10000) -> np.ndarray:
    """Harmonic fill of the masked pixels (Jacobi on the 4-neighbour Laplacian)."""
    m0 = np.asarray(m0, dtype=bool)
    if m0.all():
        raise ValueError("mask covers the whole image; nothing to inpaint from")
    n0, _ = kernels.jacobi_inpaint(np.ascontiguousarray(x, dtype=np.float64), m0, tol, max_iter)
    return n0


def active_region(mask: np.ndarray, extractor: Extractor) -> tuple[np.ndarray, np.ndarray]:
    """(optimizable pixels, score cells whose receptive field touches them)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    fields = extractor.receptive_fields(h, w)
    h1, w1 = len(fields[0][0]), len(fields[0][1])
    cells = np.zeros((h1, w1), dtype=bool)
    if not mask.any():
        return mask.copy(), cells
    integ = np.zeros((h + 1, w + 1), dtype=np.int64)
    integ[1:, 1:] = mask.cumsum(0).cumsum(1)
    for rows, cols in fields:
        r_lo, r_hi = rows[:, 0][:, None], rows[:, 1][:, None] + 1
        c_lo, c_hi = cols[:, 0][None, :], cols[:, 1][None, :] + 1
        count = integ[r_hi, c_hi] - integ[r_lo, c_hi] - integ[r_hi, c_lo] + integ[r_lo, c_lo]
        cells |= count > 0
    return mask.copy(), cells


# ----------------------------------------------------------------- objective


class F2PADObjective:
    """F(n) = l_n(n) + alpha1 * prior(n) + alpha2 * TV(n) + beta * LOG(x - n).

    Calling it returns ``(value, gradient)``; the gradient is zero outside
    ``pixels`` and the feature loss only sums over ``cells``.  The extractor
    runs on the smallest stride-aligned crop holding every active cell's
    receptive field.
    """

    def __init__(
        self,
        extractor: Extractor,
        backend,
        prior: MOGPixelPrior | None,
        x: np.ndarray,
        pixels: np.ndarray,
        cells: np.ndarray,
        alpha1: float,
        alpha2: float,
        beta: float,
        eps: float = 1e-4,
        tv_eps: float = 1e-12,
    ):
        self.extractor = extractor
        self.prior = prior
        self.x = np.asarray(x, dtype=np.float64)
        self.pixels = np.asarray(pixels, dtype=bool)
        self.cells = np.asarray(cells, dtype=bool)
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.beta = beta
        self.eps = eps
        self.tv_eps = tv_eps
        self.evaluations = 0
        self._setup_crop(backend)
        # pixel box (plus one ring) holding every TV pair that touches an active pixel
        h, w = self.x.shape[:2]
        if self.pixels.any():
            rows = np.flatnonzero(self.pixels.any(axis=1))
            cols = np.flatnonzero(self.pixels.any(axis=0))
            self.pixel_box = (
                slice(max(rows[0] - 1, 0), min(rows[-1] + 2, h)),
                slice(max(cols[0] - 1, 0), min(cols[-1] + 2, w)),
            )
        else:
            self.pixel_box = (slice(0, 0), slice(0, 0))

    def _setup_crop(self, backend) -> None:
        h, w = self.x.shape[:2]
        spec = self.extractor.spec
        total = 1
        for ly in spec.layers[: spec.tap_points[-1] + 1]:
            total *= ly.stride * ly.pool
        cell = 1
        for ly in spec.layers[: spec.tap_points[0] + 1]:
            cell *= ly.stride * ly.pool
        if not self.cells.any():
            self.box = None
            self.backend = backend
            return
        fields = self.extractor.receptive_fields(h, w)
        ci = np.flatnonzero(self.cells.any(axis=1))
        cj = np.flatnonzero(self.cells.any(axis=0))
        lo_r = min(int(rows[ci, 0].min()) for rows, _ in fields)
        hi_r = max(int(rows[ci, 1].max()) for rows, _ in fields)
        lo_c = min(int(cols[cj, 0].min()) for _, cols in fields)
        hi_c = max(int(cols[cj, 1].max()) for _, cols in fields)
        r0 = (lo_r // total) * total
        c0 = (lo_c // total) * total
        r1 = min(-(-(hi_r + 1) // total) * total, h)
        c1 = min(-(-(hi_c + 1) // total) * total, w)
        self.box = (r0, r1, c0, c1)
        self.cell_box = (r0 // cell, r1 // cell, c0 // cell, c1 // cell)
        cr0, cr1, cc0, cc1 = self.cell_box
        self.backend = backend.window(cr0, cr1, cc0, cc1)
        self.cells_window = self.cells[cr0:cr1, cc0:cc1]

    def feature_loss(self, n: np.ndarray) -> tuple[float, np.ndarray]:
        grad = np.zeros_like(self.x)
        if self.box is None:
            return 0.0, grad
        r0, r1, c0, c1 = self.box
        leaf = Tensor(n[r0:r1, c0:c1], requires_grad=True)
        with Tape() as tape:
            stack = self.extractor.extract(leaf)
            loss = self.backend.loss(stack, self.cells_window)
        grad[r0:r1, c0:c1] = backward(tape, loss)[leaf]
        return loss.item(), grad

    def terms(self, n: np.ndarray) -> dict[str, float]:
        """Unweighted component values (for diagnostics and tests)."""
        n = np.asarray(n, dtype=np.float64)
        px = self.pixels
        out = {"feature": self.feature_loss(n)[0]}
        out["prior"] = mog_prior_energy(self.prior, n[px])[0] if self.prior is not None else 0.0
        out["tv"] = self._tv(n)[0]
        out["sparsity"] = log_penalty((self.x - n)[px], self.eps)[0]
        return out

    def _tv(self, n: np.ndarray) -> tuple[float, np.ndarray]:
        box = self.pixel_box
        grad = np.zeros_like(self.x)
        if not self.pixels.any():
            return 0.0, grad
        v, g = tv_energy(n[box], self.tv_eps, mask=self.pixels[box])
        grad[box] = g
        return v, grad

    def __call__(self, n: np.ndarray) -> tuple[float, np.ndarray]:
        self.evaluations += 1
        n = np.asarray(n, dtype=np.float64)
        px = self.pixels
        value, grad = self.feature_loss(n)
        if self.alpha1 > 0 and self.prior is not None:
            v, g = mog_prior_energy(self.prior, n[px])
            value += self.alpha1 * v
            grad[px] += self.alpha1 * g
        if self.alpha2 > 0:
            v, g = self._tv(n)
            value += self.alpha2 * v
            grad += self.alpha2 * g
        if self.beta > 0:
            v, g = log_penalty((self.x - n)[px], self.eps)
            value += self.beta * v
            grad[px] -= self.beta * g
        grad[~px] = 0.0
        return value, grad


def f2pad_objective(
    extractor: Extractor,
    backend,
    prior: MOGPixelPrior | None,
    config: F2PADConfig,
    x: np.ndarray,
    m0: np.ndarray,
    pixels: np.ndarray | None = None,
    cells: np.ndarray | None = None,
    beta: float | None = None,
) -> F2PADObjective:
    """Objective with beta = beta0 / sum(m0) unless ``beta`` is given.

    ``pixels``/``cells`` default to the whole image and every score cell.
    """
    x = np.asarray(x, dtype=np.float64)
    if pixels is None:
        pixels = np.ones(x.shape[:2], dtype=bool)
    if cells is None:
        cells = active_region(pixels, extractor)[1]
    if beta is None:
        area = int(np.count_nonzero(m0))
        beta = config.beta0 / area if area else 0.0
    alpha1 = 0.0 if config.no_prior else config.alpha1
    if config.no_sparsity:
        beta = 0.0
    return F2PADObjective(
        extractor, backend, prior, x, pixels, cells,
        alpha1=alpha1, alpha2=config.alpha2, beta=beta, eps=config.eps, tv_eps=config.tv_eps,
    )


def _solve(objective, n_init, x, config: F2PADConfig, ks: int, loss_threshold: float, active, loss_log=None):
    kernel = build_sharing_kernel(x, ks, config.sigma0, config.sigma1)
    return solve(
        objective, n_init, kernel, x,
        gamma0=config.gamma0, step_floor=config.step_floor, lr=config.lr, clip=config.clip,
        loss_threshold=loss_threshold, max_iter=config.max_iter, active=active,
        bounds=(imageio.LOWER, imageio.UPPER), loss_log=loss_log,
    )


def re_estimate(
    x: np.ndarray,
    n_init: np.ndarray,
    m_star: np.ndarray,
    extractor: Extractor,
    backend,
    prior: MOGPixelPrior | None,
    config: F2PADConfig,
    loss_threshold: float,
):
    """Second solve over ``m_star`` only, sparsity term off; restarts the solver state.

    Returns ``(n_star, losses)``; outside ``m_star`` the result equals ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    m_star = np.asarray(m_star, dtype=bool)
    n = x.copy()
    if not m_star.any():
        return n, []
    n[m_star] = n_init[m_star]
    pixels, cells = active_region(m_star, extractor)
    obj = f2pad_objective(extractor, backend, prior, config, x, m_star, pixels, cells, beta=0.0)
    ks = 0 if config.no_sharing else config.ks
    res = _solve(obj, n, x, config, ks, loss_threshold, pixels)
    return res.n, res.losses


# ----------------------------------------------------------------- full run


@dataclass
class F2PADResult:
    m_star: np.ndarray
    n_star: np.ndarray
    x: np.ndarray
    m0: np.ndarray
    n0: np.ndarray | None = None
    n_solved: np.ndarray | None = None
    active: np.ndarray | None = None
    score_map: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def decomposition(self) -> Decomposition:
        return Decomposition(self.x, self.n_star)


def default_loss_threshold(backend) -> float:
    return 0.1 if getattr(backend, "kind", "") == "gaussian" else 0.05


def run(
    x: np.ndarray,
    extractor: Extractor,
    backend,
    prior: MOGPixelPrior | None,
    config: F2PADConfig | None = None,
    m0: np.ndarray | None = None,
    gt: np.ndarray | None = None,
    loss_log=None,
) -> F2PADResult:
    """Run the whole procedure on one normalized image.

    ``m0`` overrides the baseline mask (e.g. from a dataset-level threshold);
    ``gt`` is only used by ``init_mode = max-f1``.
    """
    cfg = config or F2PADConfig()
    x = np.asarray(x, dtype=np.float64)
    diag: dict = {"timings": {}}
    timings = diag["timings"]
    threshold = cfg.loss_threshold if cfg.loss_threshold is not None else default_loss_threshold(backend)

    def stage(name, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kw)
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            timings[name] = timings.get(name, 0.0) + time.perf_counter() - t0

    score_map = None
    if m0 is None:
        score_map = stage("scores", pixel_scores, extractor, backend, x)
        m0 = stage(
            "initial_mask", initial_mask, score_map, cfg.init_mode,
            q=cfg.init_percentile, threshold=cfg.init_threshold, gt=gt,
        )
    m0 = np.asarray(m0, dtype=bool)
    diag["m0_area"] = int(m0.sum())
    if not m0.any():
        log.warning("empty initial mask; returning the input as defect-free")
        diag["regime"] = "empty"
        return F2PADResult(
            m_star=np.zeros_like(m0), n_star=x.copy(), x=x, m0=m0, n0=x.copy(),
            n_solved=x.copy(), active=np.zeros_like(m0), score_map=score_map, diagnostics=diag,
        )

    dilated = stage("dilate", dilate, m0, cfg.dilation_radius)
    n0 = stage("inpaint", inpaint_init, x, m0)
    if cfg.init_only:
        m_init = stage("extract_mask", extract_mask, x - n0, cfg.init_only_tau)
        diag["regime"] = "init-only"
        return F2PADResult(
            m_star=m_init, n_star=n0, x=x, m0=m0, n0=n0, n_solved=n0, active=m0.copy(),
            score_map=score_map, diagnostics=diag,
        )

    pixels, cells = stage("active_region", active_region, dilated, extractor)
    diag["active_pixels"] = int(pixels.sum())
    diag["active_cells"] = int(cells.sum())
    if isinstance(backend, MemoryBank):
        stage("candidates", build_candidate_sets, backend, extractor.extract(n0), cfg.candidate_size)

    obj = stage("objective", f2pad_objective, extractor, backend, prior, cfg, x, m0, pixels, cells)
    diag["beta"] = obj.beta
    diag["alpha1"] = obj.alpha1
    ks = 0 if cfg.no_sharing else cfg.ks
    res = stage("solve", _solve, obj, n0, x, cfg, ks, threshold, pixels, loss_log)
    diag["solve_losses"] = res.losses
    diag["solve_iterations"] = res.iterations
    diag["final_objective"] = res.losses[-1]

    m_raw = stage("extract_mask", extract_mask, x - res.n, cfg.tau_a)
    m_star = stage("morph_open", morph_open, m_raw, cfg.open_size)
    diag["regime"] = _regime(cfg)

    if cfg.reestimate:
        n_star, re_losses = stage(
            "re_estimate", re_estimate, x, res.n, m_star, extractor, backend, prior, cfg, threshold
        )
    else:
        n_star, re_losses = x.copy(), []
        n_star[m_star] = res.n[m_star]
    diag["reestimate_losses"] = re_losses
    return F2PADResult(
        m_star=m_star, n_star=n_star, x=x, m0=m0, n0=n0, n_solved=res.n, active=pixels,
        score_map=score_map, diagnostics=diag,
    )


def _regime(cfg: F2PADConfig) -> str:
    parts = []
    if cfg.no_prior:
        parts.append("no-prior")
    if cfg.no_sparsity:
        parts.append("no-sparsity")
    if cfg.no_sharing:
        parts.append("no-sharing")
    return "+".join(parts) or "f2pad"
