"""Configuration objects and the plain-text ``key = value`` config format.

Lines are ``key = value``; ``#`` starts a comment.  Every key must be a
field of :class:`RunConfig` or :class:`F2PADConfig`; unknown keys are
rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_type_hints


class ConfigError(ValueError):
    pass


@dataclass
class F2PADConfig:
    # objective weights
    alpha1: float = 200.0
    alpha2: float = 1e-4
    beta0: float = 1e5
    eps: float = 1e-4
    tv_eps: float = 1e-12
    # solver
    gamma0: float = 1.0
    lr: float = 1e-2  # base rate multiplying the adaptive steps
    step_floor: float = 0.1
    ks: int = 5
    sigma0: float = 1.1
    sigma1: float = 3.0
    clip: float = 0.03
    loss_threshold: float | None = None  # None: 0.1 for the Gaussian field, 0.05 otherwise
    max_iter: int = 1200
    # masks
    init_mode: str = "percentile"  # percentile | threshold | max-f1
    init_percentile: float = 98.0
    init_threshold: float | None = None
    dilation_radius: int = 8
    tau_a: float = 0.1
    init_only_tau: float = 0.2
    open_size: int = 3
    reestimate: bool = True
    # models
    mog_components: int = 4
    candidate_size: int = 50
    # ablations
    no_prior: bool = False
    no_sparsity: bool = False
    init_only: bool = False
    no_sharing: bool = False

    def validate(self) -> None:
        pos = ["eps", "gamma0", "lr", "step_floor", "sigma0", "sigma1", "clip", "tau_a", "init_only_tau"]
        for name in pos:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("alpha1", "alpha2", "beta0", "tv_eps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("ks", "dilation_radius"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("max_iter", "mog_components", "candidate_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.open_size < 1 or self.open_size % 2 == 0:
            raise ConfigError(f"open_size must be a positive odd number, got {self.open_size}")
        if self.init_mode not in ("percentile", "threshold", "max-f1"):
            raise ConfigError(f"unknown init_mode {self.init_mode!r}")
        if not 0.0 <= self.init_percentile <= 100.0:
            raise ConfigError(f"init_percentile must be in [0, 100], got {self.init_percentile}")
        if self.init_mode == "threshold" and self.init_threshold is None:
            raise ConfigError("init_mode=threshold needs init_threshold")
        if self.loss_threshold is not None and self.loss_threshold < 0:
            raise ConfigError("loss_threshold must be >= 0")

    def replace(self, **changes) -> "F2PADConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class RunConfig:
    backend: str = "gaussian"  # gaussian | memory
    extractor_seed: int = 0
    image_size: int = 224
    data_dir: str = "data"
    model_dir: str = "model"
    out_dir: str = "out"
    # synthesis
    category: str = "tiles"
    n_train: int = 32
    n_test: int = 16
    synth_seed: int = 0
    contrast_min: float = 0.2
    area_min: float = 0.0  # accepted defect area as a fraction of the image
    area_max: float = 1.0
    # fitting
    ridge: float | None = None
    rel_ridge: float = 1e-3
    coreset_fraction: float = 0.1
    mog_sample_size: int = 100_000
    fit_seed: int = 0
    f2pad: F2PADConfig = field(default_factory=F2PADConfig)

    def validate(self) -> None:
        if self.backend not in ("gaussian", "memory"):
            raise ConfigError(f"backend must be gaussian or memory, got {self.backend!r}")
        if self.image_size < 4:
            raise ConfigError("image_size too small")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigError("n_train and n_test must be >= 0")
        if not 0 < self.coreset_fraction <= 1:
            raise ConfigError("coreset_fraction must be in (0, 1]")
        if self.ridge is not None and not self.ridge > 0:
            raise ConfigError("ridge must be > 0")
        if not self.contrast_min > 0:
            raise ConfigError("contrast_min must be > 0")
        if not 0 <= self.area_min < self.area_max <= 1:
            raise ConfigError("need 0 <= area_min < area_max <= 1")
        self.f2pad.validate()

    def loss_threshold(self) -> float:
        if self.f2pad.loss_threshold is not None:
            return self.f2pad.loss_threshold
        return 0.1 if self.backend == "gaussian" else 0.05


def _coerce(raw: str, hint: Any, key: str):
    text = raw.strip()
    optional = "None" in str(hint)
    if optional and text.lower() in ("none", ""):
        return None
    base = str(hint).replace(" | None", "").replace("typing.Optional[", "").rstrip("]")
    try:
        if hint is bool or base == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int or base == "int":
            return int(text)
        if hint is float or base == "float":
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return text


_RUN_HINTS = get_type_hints(RunConfig)
_F2PAD_HINTS = get_type_hints(F2PADConfig)


def known_keys() -> list[str]:
    run = [f.name for f in fields(RunConfig) if f.name != "f2pad"]
    return run + [f.name for f in fields(F2PADConfig)]


def apply_overrides(cfg: RunConfig, pairs: dict[str, str]) -> RunConfig:
    for key, raw in pairs.items():
        key = key.strip().replace("-", "_")
        if key in _RUN_HINTS and key != "f2pad":
            setattr(cfg, key, _coerce(raw, _RUN_HINTS[key], key))
        elif key in _F2PAD_HINTS:
            setattr(cfg.f2pad, key, _coerce(raw, _F2PAD_HINTS[key], key))
        else:
            raise ConfigError(f"unknown config key {key!r}")
    return cfg


def parse_config_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        apply_overrides(cfg, parse_config_text(Path(path).read_text()))
    if overrides:
        apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        if f.name != "f2pad":
            lines.append(f"{f.name} = {getattr(cfg, f.name)}")
    for f in fields(F2PADConfig):
        lines.append(f"{f.name} = {getattr(cfg.f2pad, f.name)}")
    return "\n".join(lines) + "\n"
