"""Strict JSON run configuration.

Every section mirrors a library dataclass; keys not present in the defaults are
rejected and values are type-checked against the default's type.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .detection import DetectorConfig, SweepConfig
from .errors import ConfigError
from .mask_vae import VAEConfig, VAETrainConfig
from .model import DenoiserConfig, DiffusionTrainConfig, GuidanceScales, LossWeights


@dataclass(frozen=True)
class DataSection:
    n_subjects: int = 200
    prevalence: float = 0.05
    tvr_mix: tuple[float, float, float] = (1.0, 1.0, 1.0)
    contrast: float = 0.35
    shape: tuple[int, int, int] = (12, 64, 64)
    n_train_positive: int = 64

    def __post_init__(self):
        if len(self.shape) != 3 or self.shape[1] % 32 or self.shape[2] % 32:
            raise ConfigError(f"data.shape must be (Z, H, W) with H, W divisible by 32, got {self.shape}")
        if self.n_train_positive < 1 or self.n_subjects < 1:
            raise ConfigError("subject counts must be positive")


@dataclass(frozen=True)
class DiffusionSection:
    model: DenoiserConfig = DenoiserConfig()
    train: DiffusionTrainConfig = DiffusionTrainConfig()
    loss: LossWeights = LossWeights()
    guidance: GuidanceScales = GuidanceScales()
    sample_steps: int = 50
    eta: float = 0.0


@dataclass(frozen=True)
class VAESection:
    model: VAEConfig = VAEConfig()
    train: VAETrainConfig = VAETrainConfig()


@dataclass(frozen=True)
class SweepSection:
    protocol: SweepConfig = SweepConfig()


@dataclass(frozen=True)
class AnalysisSection:
    ms_ssim_scales: int = 3
    n_samples: int = 128


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = DataSection()
    diffusion: DiffusionSection = DiffusionSection()
    vae: VAESection = VAESection()
    detector: DetectorConfig = DetectorConfig()
    sweep: SweepSection = SweepSection()
    analysis: AnalysisSection = AnalysisSection()

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @property
    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _coerce(path: str, default, value):
    if dataclasses.is_dataclass(default):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected an object")
        return _build(type(default), value, path, default)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        proto = default[0] if default else None
        return tuple(_coerce(f"{path}[{i}]", proto, v) if proto is not None else v for i, v in enumerate(value))
    raise ConfigError(f"{path}: unsupported setting")


def _build(cls, doc: dict, path: str, base=None):
    base = base if base is not None else cls()
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        where = path or "top level"
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name in known:
        default = getattr(base, name)
        key = f"{path}.{name}" if path else name
        kwargs[name] = _coerce(key, default, doc[name]) if name in doc else default
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return _build(RunConfig, doc, "")


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)
