"""Experiment configuration: a flat TOML file of documented keys.

Unknown keys are rejected so a misspelt hyperparameter never passes silently.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

import tomli

from .data import SyntheticSpec
from .errors import ConfigError


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    # model shape
    num_classes: int = 7
    num_domains: int = 4
    prompt_len: int = 4
    token_dim: int = 16
    image_dim: int = 16
    text_len: int = 1
    text_hidden: int = 64
    etf_dim: int = 16
    transform_hidden: int = 32
    # objectives
    tau: float = 0.07
    lam: float = 1.0
    eta: float = 1.0
    # optimisation
    rounds: int = 30
    transform_epochs: int = 1
    prompt_epochs: int = 1
    batch_size: int = 32
    lr_transform: float = 0.05
    lr_prompt: float = 0.5
    prompt_init_std: float = 0.02
    # federation
    alpha: float = 0.0
    clients_per_domain: int = 3
    weighted_aggregation: bool = False
    workers: int = 1
    checkpoint_every: int = 0
    # ablation switches
    personalized_prompt: bool = True
    semantic_align: bool = True
    domain_align: bool = True
    # data
    data_path: str = ""
    train_fraction: float = 0.8
    raw_dim: int = 16
    samples_per_class: int = 100
    class_scale: float = 1.0
    domain_shift: float = 1.5
    noise: float = 1.5

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.type == "bool" and not isinstance(value, bool):
                raise ConfigError(f"{f.name} must be a boolean")
            if f.type == "int" and (isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{f.name} must be an integer")
            if f.type == "float":
                if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                    raise ConfigError(f"{f.name} must be a finite number")
                object.__setattr__(self, f.name, float(value))
            if f.type == "str" and not isinstance(value, str):
                raise ConfigError(f"{f.name} must be a string")
        positive = (
            "num_classes", "num_domains", "prompt_len", "token_dim", "image_dim", "text_len",
            "text_hidden", "etf_dim", "transform_hidden", "batch_size", "clients_per_domain",
            "workers", "raw_dim", "samples_per_class", "tau",
        )
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("rounds", "transform_epochs", "prompt_epochs", "checkpoint_every", "lam", "eta",
                     "lr_transform", "lr_prompt", "prompt_init_std", "alpha", "class_scale",
                     "domain_shift", "noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.token_dim != self.image_dim:
            raise ConfigError("token_dim must equal image_dim (the domain prompt is modulated elementwise)")
        if self.etf_dim < max(self.num_classes, self.num_domains):
            raise ConfigError("etf_dim must be >= max(num_classes, num_domains)")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie strictly between 0 and 1")

    @property
    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            num_classes=self.num_classes,
            num_domains=self.num_domains,
            raw_dim=self.raw_dim,
            samples_per_class=self.samples_per_class,
            class_scale=self.class_scale,
            domain_shift=self.domain_shift,
            noise=self.noise,
            seed=self.seed,
        )

    @property
    def dirichlet(self) -> bool:
        return self.alpha > 0

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        try:
            return cls(**raw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


PRESETS = {
    "desk": ExperimentConfig(),
    # sizes reported for the real-data runs (16 tokens, 100 rounds, lr 0.001, batch 64)
    "paper-scale": ExperimentConfig(prompt_len=16, rounds=100, batch_size=64, lr_prompt=0.001, lr_transform=0.001),
}


def _literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    return repr(value)


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {_literal(v)}\n" for k, v in cfg.to_dict().items())


def loads(text: str) -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    nested = [k for k, v in raw.items() if isinstance(v, dict)]
    if nested:
        raise ConfigError(f"config must be flat; found table(s) {nested}")
    return ExperimentConfig.from_dict(raw)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")
