"""Run configuration: nested dataclasses, JSON round-trip, "paper" and "desk" profiles."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .fields import CANONICAL_GRID, DEFORMATION_GRID, HashGridConfig
from .losses import LossWeights


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    canonical_grid: HashGridConfig = CANONICAL_GRID
    deformation_grid: HashGridConfig = DEFORMATION_GRID
    # grid used by the coarse field only; None means deformation_grid
    coarse_grid: HashGridConfig | None = None
    hidden: int = 64
    feature_dim: int = 15

    @property
    def coarse(self) -> HashGridConfig:
        return self.coarse_grid or self.deformation_grid


@dataclass
class RenderConfig:
    samples: int = 3072
    vignette_mode: str = "normalized_squared"
    chunk: int = 4096


@dataclass
class OptimConfig:
    canonical_lr: float = 1e-2
    canonical_decay: float = 0.01
    warmup_iters: int = 1000
    warmup_start: float = 0.01
    deformation_lr: float = 1e-3
    deformation_decay: float = 0.1
    vignetting_lr: float = 1e-2
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    rays: int = 1024
    foreground_fraction: float = 0.8
    canonical_iters: int = 20000
    coarse_iters: int = 5000
    fine_iters: int = 5000
    mask_threshold: float = 0.05
    mask_dilation: int = 3
    carve_resolution: int = 128
    voxel_dilation: int = 2
    log_every: int = 50
    online: bool = True


@dataclass
class EvalConfig:
    inversion_resolution: int = 128
    # side length of the inversion cube in normalized scene units
    inversion_side: float = 0.1
    cube_size: int = 16
    mask_delta: float = 0.1
    mask_sigma: float = 0.05
    mask_opening: int = 1
    mask_dilation: int = 2


@dataclass
class RunConfig:
    profile: str = "paper"
    seed: int = 0
    threads: int = 1
    precision: str = "float32"
    model: ModelConfig = field(default_factory=ModelConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def paper_config() -> RunConfig:
    return RunConfig(profile="paper")


def desk_config() -> RunConfig:
    """Scaled-down profile for 64x64 synthetic scenes on a CPU."""
    S = 64
    return RunConfig(
        profile="desk",
        model=ModelConfig(
            canonical_grid=HashGridConfig(levels=8, features_per_level=2, base_resolution=16,
                                          per_level_scale=1.486, table_size=2**17),
            deformation_grid=HashGridConfig(levels=6, features_per_level=2, base_resolution=32,
                                            per_level_scale=1.3819, table_size=2**15),
        ),
        render=RenderConfig(samples=S),
        # one-percent window is under one sample at this S; keep a two-sample half-window.
        # Published regularizer weights freeze the coarse field at this scale; both are
        # divided by 50, keeping their ratio.
        losses=LossWeights(coarse=20.0, fine=0.6, f=2.25 / S),
        optim=OptimConfig(warmup_iters=100),
        train=TrainConfig(rays=512, canonical_iters=2000, coarse_iters=500, fine_iters=500, log_every=25),
        eval=EvalConfig(inversion_resolution=64),
    )


PROFILES = {"paper": paper_config, "desk": desk_config}


def profile(name: str) -> RunConfig:
    try:
        return PROFILES[name]()
    except KeyError:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}") from None


def to_dict(cfg) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        ftype = _field_type(cls, name)
        sub = f"{path}.{name}" if path else name
        if ftype is not None and value is not None:
            kwargs[name] = _build(ftype, value, sub)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


_NESTED = {
    (RunConfig, "model"): ModelConfig, (RunConfig, "render"): RenderConfig, (RunConfig, "losses"): LossWeights,
    (RunConfig, "optim"): OptimConfig, (RunConfig, "train"): TrainConfig, (RunConfig, "eval"): EvalConfig,
    (ModelConfig, "canonical_grid"): HashGridConfig, (ModelConfig, "deformation_grid"): HashGridConfig,
    (ModelConfig, "coarse_grid"): HashGridConfig,
}


def _field_type(cls, name):
    return _NESTED.get((cls, name))


def merge(base: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Apply a (possibly partial) nested dict on top of ``base``."""
    data = to_dict(base)

    def rec(dst: dict, src: dict, path: str):
        for k, v in src.items():
            sub = f"{path}.{k}" if path else k
            if k not in dst:
                raise ConfigError(f"{sub}: unknown key")
            if isinstance(v, dict) and isinstance(dst[k], dict):
                rec(dst[k], v, sub)
            else:
                dst[k] = v

    rec(data, overrides, "")
    return from_dict(data)


def from_dict(data: dict[str, Any]) -> RunConfig:
    return _build(RunConfig, data, "")


def load(path: str | Path, profile_name: str | None = None) -> RunConfig:
    """Read a JSON config; partial files are layered over their profile."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    name = profile_name or data.get("profile", "paper")
    return merge(profile(name), {**data, "profile": name})


def dumps(cfg: RunConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def save(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg) + "\n")


ABLATIONS = ("full", "no_extend", "no_online", "no_fine")


def ablation(cfg: RunConfig, name: str) -> RunConfig:
    """Variant of ``cfg`` for one ablation. ``no_fine`` only changes evaluation, so training is unchanged."""
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation {name!r}; choose from {list(ABLATIONS)}")
    if name == "no_extend":
        g = dataclasses.asdict(cfg.model.deformation_grid)
        return merge(cfg, {"model": {"coarse_grid": {**g, "base_resolution": 512}}, "losses": {"f": 0.0}})
    if name == "no_online":
        return merge(cfg, {"train": {"online": False}})
    return cfg
