"""Pixel-space penalty terms, each returning ``(value, gradient)``.

* :func:`log_penalty` - nonconvex sparsity on the anomalous part
* :func:`mog_prior_energy` - distance of each pixel to its closest colour cluster
* :func:`tv_energy` - isotropic total variation, no wrap-around
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import f2td

log = logging.getLogger(__name__)

COV_FLOOR = 1e-6


def log_penalty(a: np.ndarray, eps: float = 1e-4) -> tuple[float, np.ndarray]:
    """sum_ij log(sqrt(|a_ij|^2 + eps) + |a_ij|), norms over the channel axis.

    d/dr log(sqrt(r^2+eps) + r) = 1/sqrt(r^2+eps), so the gradient is
    a / (r * sqrt(r^2+eps)), bounded by 1/sqrt(eps) and set to 0 at a = 0.
    """
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    a = np.asarray(a, dtype=np.float64)
    r2 = np.einsum("...c,...c->...", a, a)
    r = np.sqrt(r2)
    s = np.sqrt(r2 + eps)
    value = float(np.sum(np.log(s + r)))
    coef = np.zeros_like(r)
    nz = r > 0
    coef[nz] = 1.0 / (r[nz] * s[nz])
    return value, a * coef[..., None]


def tv_energy(n: np.ndarray, smooth_eps: float = 1e-12, mask: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """sum of |n[i+1,j]-n[i,j]| + |n[i,j+1]-n[i,j]|, each as sqrt(|d|^2 + smooth_eps).

    With ``mask`` only pairs touching a masked pixel enter the value; the
    gradient is unchanged at masked pixels.
    """
    if smooth_eps < 0:
        raise ValueError(f"smooth_eps must be >= 0, got {smooth_eps}")
    n = np.asarray(n, dtype=np.float64)
    grad = np.zeros_like(n)
    value = 0.0
    for axis in (0, 1):
        d = np.diff(n, axis=axis)
        t = np.sqrt(np.einsum("...c,...c->...", d, d) + smooth_eps)
        if mask is None:
            value += float(t.sum())
        else:
            if axis == 0:
                touch = mask[1:] | mask[:-1]
            else:
                touch = mask[:, 1:] | mask[:, :-1]
            value += float(t[touch].sum())
        q = np.zeros_like(d)
        nz = t > 0
        q[nz] = d[nz] / t[nz][:, None]
        if axis == 0:
            grad[1:] += q
            grad[:-1] -= q
        else:
            grad[:, 1:] += q
            grad[:, :-1] -= q
    return value, grad


@dataclass
class MOGPixelPrior:
    weights: np.ndarray  # (q,)
    means: np.ndarray  # (q, 3)
    covariances: np.ndarray  # (q, 3, 3)
    factors: np.ndarray = field(init=False, repr=False)  # precision = W^T W
    log_likelihood: list[float] = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        chol = np.linalg.cholesky(self.covariances)
        self.factors = np.tril(np.linalg.solve(chol, np.broadcast_to(np.eye(chol.shape[-1]), chol.shape)))

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def component_distances(self, pixels: np.ndarray) -> np.ndarray:
        """Squared Mahalanobis distance of each pixel to each component, shape (..., q)."""
        p = np.asarray(pixels, dtype=np.float64)
        d = p[..., None, :] - self.means  # (..., q, 3)
        z = np.einsum("qij,...qj->...qi", self.factors, d)
        return np.einsum("...qi,...qi->...q", z, z)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        f2td.save_tensor(d / "mog_weights.f2td", self.weights)
        f2td.save_tensor(d / "mog_means.f2td", self.means)
        f2td.save_tensor(d / "mog_covariances.f2td", self.covariances)

    @classmethod
    def load(cls, directory) -> "MOGPixelPrior":
        d = Path(directory)
        return cls(
            weights=f2td.load_tensor(d / "mog_weights.f2td"),
            means=f2td.load_tensor(d / "mog_means.f2td"),
            covariances=f2td.load_tensor(d / "mog_covariances.f2td"),
        )


def mog_prior_energy(prior: MOGPixelPrior, n: np.ndarray) -> tuple[float, np.ndarray]:
    """sum_ij min_q Mahalanobis^2(n_ij; mu_q, Lambda_q); mixture weights are ignored.

    The gradient follows the minimizing component (lowest index on ties).
    """
    n = np.asarray(n, dtype=np.float64)
    dist = prior.component_distances(n)
    best = np.argmin(dist, axis=-1)
    value = float(np.take_along_axis(dist, best[..., None], axis=-1).sum())
    prec = np.einsum("qki,qkj->qij", prior.factors, prior.factors)
    d = n - prior.means[best]
    grad = 2.0 * np.einsum("...ij,...j->...i", prec[best], d)
    return value, grad


# ----------------------------------------------------------------- EM fitting


def _kmeanspp(x: np.ndarray, q: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, q):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(x)))
        else:
            idx = int(rng.choice(len(x), p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _floor_cov(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    if vals.min() >= COV_FLOOR:
        return cov
    vals = np.maximum(vals, COV_FLOOR)
    out = (vecs * vals) @ vecs.T
    return 0.5 * (out + out.T)


def _log_gauss(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """log N(x | mu_q, Sigma_q), shape (N, q)."""
    dim = x.shape[1]
    out = np.empty((x.shape[0], len(means)))
    for k in range(len(means)):
        chol = np.linalg.cholesky(covs[k])
        z = np.linalg.solve(chol, (x - means[k]).T)
        logdet = 2.0 * np.log(np.diag(chol)).sum()
        out[:, k] = -0.5 * (np.sum(z * z, axis=0) + logdet + dim * np.log(2 * np.pi))
    return out


def fit_mog(
    pixels,
    q: int,
    seed: int = 0,
    tol: float = 1e-7,
    max_iter: int = 500,
) -> MOGPixelPrior:
    """EM for a q-component Gaussian mixture, k-means++ initialization.

    Stops when the mean per-sample log-likelihood gains less than ``tol``.
    The per-iteration log-likelihood trace is kept on the result.
    """
    x = np.asarray(pixels, dtype=np.float64).reshape(-1, np.shape(pixels)[-1])
    n, dim = x.shape
    if q < 1:
        raise ValueError(f"need at least one component, got {q}")
    if n < 10 * q:
        raise ValueError(f"need at least {10 * q} pixels for {q} components, got {n}")
    rng = np.random.default_rng(seed)
    means = _kmeanspp(x, q, rng)
    # hard assignment to seed the covariances
    lab = np.argmin(((x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)
    glob = _floor_cov(np.cov(x.T).reshape(dim, dim))
    covs = np.empty((q, dim, dim))
    weights = np.empty(q)
    for k in range(q):
        pts = x[lab == k]
        weights[k] = max(len(pts), 1) / n
        covs[k] = _floor_cov(np.cov(pts.T).reshape(dim, dim)) if len(pts) > dim else glob
    weights /= weights.sum()

    history: list[float] = []
    for _ in range(max_iter):
        lg = _log_gauss(x, means, covs) + np.log(weights)
        mx = lg.max(axis=1, keepdims=True)
        lse = mx[:, 0] + np.log(np.exp(lg - mx).sum(axis=1))
        ll = float(lse.mean())
        if history and ll - history[-1] < tol:
            history.append(ll)
            break
        history.append(ll)
        resp = np.exp(lg - lse[:, None])
        nk = resp.sum(axis=0)
        for k in range(q):
            if nk[k] < 1e-8 * n:
                # empty component: restart it at the worst-explained sample
                far = int(np.argmin(lse))
                log.warning("EM component %d emptied; re-seeding at sample %d", k, far)
                means[k] = x[far]
                covs[k] = glob
                weights[k] = 1.0 / n
                continue
            weights[k] = nk[k] / n
            means[k] = resp[:, k] @ x / nk[k]
            d = x - means[k]
            covs[k] = _floor_cov((resp[:, k, None] * d).T @ d / nk[k])
        weights /= weights.sum()
    return MOGPixelPrior(weights=weights, means=means, covariances=covs, log_likelihood=history)
