"""Fitting and persisting the full model set: extractor, backend, pixel prior."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backends import GaussianField, MemoryBank, fit_gaussian_field, fit_memory_bank, load_backend
from .config import RunConfig
from .extractor import Extractor, ExtractorSpec, build_extractor
from .regularizers import MOGPixelPrior, fit_mog

log = logging.getLogger(__name__)


@dataclass
class Models:
    extractor: Extractor
    backend: GaussianField | MemoryBank
    prior: MOGPixelPrior

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        self.extractor.save(d)
        self.backend.save(d)
        self.prior.save(d)
        return d

    @classmethod
    def load(cls, directory) -> "Models":
        d = Path(directory)
        if not (d / "extractor.json").exists():
            raise FileNotFoundError(f"no fitted models in {d}")
        return cls(Extractor.load(d), load_backend(d), MOGPixelPrior.load(d))


def fit_models(images: list[np.ndarray], cfg: RunConfig) -> Models:
    """Fit backend and pixel prior on normalized normal images."""
    if len(images) < 2:
        raise ValueError(f"need at least 2 training images, got {len(images)}")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"training images differ in shape: {sorted(shapes)}")
    extractor = build_extractor(ExtractorSpec(seed=cfg.extractor_seed))
    stacks = [extractor.extract(im) for im in images]
    if cfg.backend == "gaussian":
        backend = fit_gaussian_field(stacks, ridge=cfg.ridge, rel_ridge=cfg.rel_ridge)
    else:
        backend = fit_memory_bank(stacks, coreset_fraction=cfg.coreset_fraction, seed=cfg.fit_seed)
    pixels = np.concatenate([im.reshape(-1, im.shape[-1]) for im in images])
    if len(pixels) > cfg.mog_sample_size:
        idx = np.random.default_rng(cfg.fit_seed).choice(len(pixels), cfg.mog_sample_size, replace=False)
        pixels = pixels[np.sort(idx)]
    prior = fit_mog(pixels, cfg.f2pad.mog_components, seed=cfg.fit_seed)
    return Models(extractor, backend, prior)
