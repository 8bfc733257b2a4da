"""Run configuration: dataclass tree, YAML loading, presets and overrides.

Unknown keys are rejected at every level. ``RunConfig()`` carries the
published full-scale hyperparameters; the ``desk`` preset shrinks the
network and schedule so the whole pipeline runs on a laptop CPU.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .degrade import DatasetConfig
from .errors import ConfigError
from .restorer import RestorerConfig


@dataclass
class BackendConfig:
    mode: str = "toy"
    seed: int = 0
    weights: str | None = None


@dataclass
class BackendsConfig:
    vision_language: BackendConfig = field(default_factory=BackendConfig)
    semantic: BackendConfig = field(default_factory=BackendConfig)
    perceptual: BackendConfig = field(default_factory=BackendConfig)


@dataclass
class Stage1Config:
    init_mode: str = "partial_random"
    n_tokens: int = 16
    iters: int = 100_000
    lr: float = 4e-5
    batch: int = 32
    weight_decay: float = 0.0
    log_every: int = 100


@dataclass
class MediumConfig:
    """Proxy restorer used for two-fold cross restoration of medium images."""

    restorer: RestorerConfig = field(default_factory=lambda: RestorerConfig(base_channels=8, blocks=[1, 1, 1, 1]))
    iters: int = 300
    lr: float = 1e-3
    batch: int = 4


@dataclass
class Stage2Config:
    iters: int = 400_000
    lr: float = 2e-4
    betas: list = field(default_factory=lambda: [0.9, 0.999])
    weight_decay: float = 1e-4
    batch: int = 6
    patch: int = 128
    flips: bool = True
    restorer: RestorerConfig = field(default_factory=RestorerConfig)
    lambda_cl: float = 0.1
    lambda_clip: float = 0.05
    lambda_dpl: float = 0.1
    tau: float = 0.07
    gamma: float = 0.25
    lambda_easy: float = 2.0
    use_cl: bool = True
    use_clip: bool = True
    use_dpl: bool = True
    cl_crop: int = 32
    dial_ratios: list = field(default_factory=lambda: [0.2, 0.5, 0.8])
    monitor_size: int = 16
    checkpoint_every: int = 1000
    log_every: int = 100


@dataclass
class PathsConfig:
    workdir: str = "runs/default"

    @property
    def root(self) -> Path:
        return Path(self.workdir)

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def logs(self) -> Path:
        return self.root / "logs"

    @property
    def data(self) -> Path:
        return self.root / "data"

    @property
    def prompts(self) -> Path:
        return self.checkpoints / "prompts.npz"

    @property
    def medium(self) -> Path:
        return self.root / "medium.npz"

    @property
    def restorer(self) -> Path:
        return self.checkpoints / "restorer.npz"


@dataclass
class RunConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig(kinds=["noise", "haze", "rain"], size=24, image_size=128))
    eval_dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig(kinds=["noise", "haze", "rain"], size=12, image_size=128, seed=1000))
    stage1: Stage1Config = field(default_factory=Stage1Config)
    medium: MediumConfig = field(default_factory=MediumConfig)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    backends: BackendsConfig = field(default_factory=BackendsConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def desk_preset() -> dict:
    """Overrides for the CPU-friendly desk-scale run."""
    return {
        "dataset": {"image_size": 64, "size": 24},
        "eval_dataset": {"image_size": 64, "size": 12},
        "stage1": {"iters": 500, "log_every": 50},
        "medium": {"iters": 200},
        "stage2": {
            "iters": 2000,
            # the narrow desk network tolerates (and needs) a larger step size
            "lr": 1e-3,
            "batch": 4,
            "patch": 64,
            "restorer": {"base_channels": 8, "blocks": [1, 1, 1, 1]},
            "checkpoint_every": 500,
            "log_every": 50,
        },
    }


PRESETS = {"full": dict, "desk": desk_preset}


def _build(cls, data: dict | None, path: str):
    data = dict(data or {})
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or '<root>'}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, f in names.items():
        if name not in data:
            continue
        value = data[name]
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{name} must be a mapping")
            base = dataclasses.asdict(current)
            kwargs[name] = _build(type(current), _merge(base, value), f"{path}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config at {path or '<root>'}: {exc}") from exc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def parse_overrides(pairs) -> dict:
    """``["stage2.iters=10", "dataset.kinds=[noise]"]`` -> nested dict (values parsed as YAML)."""
    out: dict = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        node = out
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return out


def build_config(data: dict | None = None, preset: str = "full", overrides=None) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    merged = _merge(PRESETS[preset](), data or {})
    merged = _merge(merged, parse_overrides(overrides))
    return _build(RunConfig, merged, "")


def load_config(path: str | Path | None = None, preset: str = "full", overrides=None) -> RunConfig:
    data: Any = {}
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        preset = data.pop("preset", preset)
    return build_config(data, preset, overrides)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
