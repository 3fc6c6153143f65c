"""Run configuration: every tunable in one JSON-serialisable tree.

``RunConfig.seed`` is the experiment seed; it is copied into the trainer,
sampler and codec seeds by :meth:`RunConfig.resolved`. Scene generation has
its own ``data.seed`` so that several training seeds can share a dataset.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ectraj.denoiser import DenoiserConfig
from ectraj.errors import ConfigError
from ectraj.latent import CodecFitConfig
from ectraj.sampler import SamplerConfig
from ectraj.scenegen import OracleConfig, SceneConfig
from ectraj.trainer import TrainConfig


@dataclass
class DataConfig:
    n_train: int = 2000
    n_val: int = 100
    n_test: int = 500
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)


@dataclass
class MetricsConfig:
    K: int = 6
    brier_form: str = "standard"
    n_plots: int = 4


def _desk_denoiser() -> DenoiserConfig:
    return DenoiserConfig(d_model=32, n_layers=1)


def _desk_train() -> TrainConfig:
    return TrainConfig(ema_alpha=0.99, val_every=10)


@dataclass
class RunConfig:
    tag: str = "ectraj"
    seed: int = 0
    codec_path: str = ""  # reuse a fitted codec file instead of fitting one
    data: DataConfig = field(default_factory=DataConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    codec: CodecFitConfig = field(default_factory=lambda: CodecFitConfig(epochs=300))
    denoiser: DenoiserConfig = field(default_factory=_desk_denoiser)
    train: TrainConfig = field(default_factory=_desk_train)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        return cls.from_json(p.read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def resolved(self) -> "RunConfig":
        """Copy with the experiment seed pushed into component seeds and the
        sampler's grid size tied to the final curriculum grid."""
        cfg = RunConfig.from_dict(self.to_dict())
        cfg.train.seed = cfg.seed
        cfg.sampler.seed = cfg.seed
        cfg.codec.seed = cfg.seed
        cfg.sampler.N_final = cfg.train.base_N * 4
        cfg.denoiser.use_priors = cfg.oracle.enabled
        if cfg.codec.latent_dim != cfg.denoiser.latent_dim:
            raise ConfigError("codec.latent_dim and denoiser.latent_dim differ")
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.data.scene.validate()
        if min(self.data.n_train, self.data.n_test) < 1 or self.data.n_val < 0:
            raise ConfigError("need n_train >= 1, n_test >= 1, n_val >= 0")
        self.train.validate(self.data.scene.T_f)
        self.sampler.validate()
        if self.metrics.brier_form not in ("standard", "literal"):
            raise ConfigError(f"unknown brier form {self.metrics.brier_form!r}")

    def hash(self) -> str:
        """Short content hash of the resolved configuration (the tag is excluded)."""
        d = self.to_dict()
        d.pop("tag", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys at {where or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        path = f"{where}.{name}" if where else name
        if value is None or current is None:
            kwargs[name] = tuple(value) if isinstance(value, list) else value
        elif dataclasses.is_dataclass(current):
            kwargs[name] = _build(type(current), value, path)
        elif isinstance(current, tuple):
            kwargs[name] = tuple(value)
        elif isinstance(current, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path} must be true/false")
            kwargs[name] = value
        elif isinstance(current, (int, float)) and not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number")
        elif isinstance(current, float):
            kwargs[name] = float(value)
        elif isinstance(current, int):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{path} must be an integer")
            kwargs[name] = int(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where or 'config'}: {exc}") from exc


def tiny_config(**overrides) -> RunConfig:
    """A seconds-scale configuration for smoke tests."""
    cfg = RunConfig(tag="tiny")
    cfg.data.n_train, cfg.data.n_val, cfg.data.n_test = 50, 10, 20
    cfg.codec.epochs = 100
    cfg.train.epochs = 3
    cfg.train.val_every = 1
    cfg.train.batch_size = 16
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg
