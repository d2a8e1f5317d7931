"""Central finite-difference checks for every differentiable piece.

The error of a check is ``max_i |analytic_i - numeric_i| / max_j |numeric_j|``
(max error relative to the largest gradient component).
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .backends import build_candidate_sets, fit_gaussian_field, fit_memory_bank
from .config import F2PADConfig
from .extractor import ExtractorSpec, LayerSpec, build_extractor
from .regularizers import fit_mog, log_penalty, mog_prior_energy, tv_energy

COMPONENT_TOL = 1e-6
OBJECTIVE_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}\t{self.name}\tmax_rel_err={self.error:.3e}\ttol={self.tol:.0e}\t{self.seconds:.2f}s"


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return float("inf")
    scale = max(float(np.max(np.abs(numeric))), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _tape_check(name: str, build: Callable[..., T.Tensor], inputs: list[np.ndarray], h: float = 1e-6) -> CheckResult:
    """Check d(sum of weighted output)/d(each input) through the tape."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(len(name))
    probe = None

    def forward(arrs, track=False):
        nonlocal probe
        leaves = [T.Tensor(a, requires_grad=track) for a in arrs]
        with T.Tape() as tape:
            out = build(*leaves)
            if probe is None:
                probe = rng.normal(size=out.shape)
            loss = T.sum_all(T.mul(out, T.Tensor(probe))) if out.ndim else out
        return tape, loss, leaves

    tape, loss, leaves = forward(inputs, track=True)
    grads = T.backward(tape, loss)
    err = 0.0
    for k, arr in enumerate(inputs):
        def f(v, k=k):
            arrs = list(inputs)
            arrs[k] = v
            return forward(arrs)[1].item()

        err = max(err, rel_error(grads[leaves[k]], numeric_grad(f, arr, h)))
    return CheckResult(name, err, COMPONENT_TOL, time.perf_counter() - t0)


def _fn_check(name: str, fn: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray, tol=COMPONENT_TOL, h=1e-6):
    t0 = time.perf_counter()
    _, g = fn(x)
    err = rel_error(g, numeric_grad(lambda v: fn(v)[0], x, h))
    return CheckResult(name, err, tol, time.perf_counter() - t0)


def _small_extractor(seed: int = 0):
    spec = ExtractorSpec(
        layers=(LayerSpec((3, 3, 3, 4)), LayerSpec((3, 3, 4, 6))),
        tap_points=(0, 1),
        seed=seed,
    )
    return build_extractor(spec)


def component_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    x = rng.normal(size=(6, 6, 3))
    k = rng.normal(size=(3, 3, 3, 4))
    out.append(_tape_check("conv2d", lambda a, b: T.conv2d(a, b, stride=1, pad=1), [x, k]))
    out.append(_tape_check("conv2d_stride2", lambda a, b: T.conv2d(a, b, stride=2, pad=1), [x, k]))
    out.append(_tape_check("avg_pool", lambda a: T.avg_pool(a, 2), [x]))
    out.append(_tape_check("leaky_relu", lambda a: T.leaky_relu(a, 0.1), [x]))
    out.append(_tape_check("upsample_nearest", lambda a: T.upsample_nearest(a, 12, 12), [x]))
    y = rng.normal(size=(6, 6, 2))
    out.append(_tape_check("concat_channels", lambda a, b: T.concat_channels([a, b]), [x, y]))
    z = rng.normal(size=(6, 6, 3))
    out.append(_tape_check("add", T.add, [x, z]))
    out.append(_tape_check("mul", T.mul, [x, z]))
    out.append(_tape_check("scale", lambda a: T.scale(a, 2.5), [x]))
    out.append(_tape_check("sum_all", T.sum_all, [x]))

    ext = _small_extractor(seed)
    img = rng.normal(size=(8, 8, 3))
    out.append(_tape_check("extractor", lambda a: ext.extract(a).concat, [img]))

    train = [ext.extract(img + 0.3 * rng.normal(size=img.shape)) for _ in range(12)]
    field = fit_gaussian_field(train, rel_ridge=0.1)
    out.append(_tape_check("gaussian_loss", lambda f: field.loss(f), [train[0].concat.data + 0.5]))
    bank = fit_memory_bank(train, coreset_fraction=0.5, seed=seed)
    build_candidate_sets(bank, train[1], size=5)
    out.append(_tape_check("memory_loss", lambda f: bank.loss(f), [train[0].concat.data + 0.5]))

    a = rng.normal(size=(5, 5, 3))
    out.append(_fn_check("log_penalty", lambda v: log_penalty(v, 1e-4), a))
    out.append(_fn_check("tv_energy", lambda v: tv_energy(v, 1e-12), a))
    prior = fit_mog(rng.normal(size=(400, 3)), 3, seed=seed)
    out.append(_fn_check("mog_prior", lambda v: mog_prior_energy(prior, v), a))
    return out


def objective_check(seed: int = 0, corrupt: bool = False) -> CheckResult:
    """Full objective (all terms active) on an 8x8 image with random models."""
    from .pipeline import f2pad_objective

    rng = np.random.default_rng(seed)
    ext = _small_extractor(seed)
    if corrupt:
        w = ext.weights[0].data.copy()
        w.flat[0] = np.nan
        ext.weights[0] = T.Tensor(w, _check=False)
    base = rng.normal(size=(8, 8, 3))
    train = [ext.extract(base + 0.3 * rng.normal(size=base.shape)) for _ in range(12)]
    field = fit_gaussian_field(train, rel_ridge=0.1)
    prior = fit_mog(rng.normal(size=(400, 3)), 3, seed=seed)
    x = base + rng.normal(size=base.shape)
    m0 = np.zeros((8, 8), dtype=bool)
    m0[2:5, 3:6] = True
    cfg = F2PADConfig(alpha1=0.7, alpha2=0.3, beta0=9.0)
    obj = f2pad_objective(ext, field, prior, cfg, x, m0)
    n = x - rng.normal(scale=0.5, size=x.shape)
    t0 = time.perf_counter()
    try:
        _, g = obj(n)
        err = rel_error(g, numeric_grad(lambda v: obj(v)[0], n, 1e-6))
    except (T.NonFiniteError, FloatingPointError, ValueError):
        err = float("inf")
    return CheckResult("objective" + ("_corrupted" if corrupt else ""), err, OBJECTIVE_TOL, time.perf_counter() - t0)


def run_all(seed: int = 0, corrupt: bool = False) -> list[CheckResult]:
    return component_checks(seed) + [objective_check(seed, corrupt)]
