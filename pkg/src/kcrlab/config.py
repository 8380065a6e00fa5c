"""Run configuration and the versioned JSON config file."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig

SCHEMA = 1


@dataclass
class RunConfig:
    t_search: int = 10
    t_train: int = 40
    t_warm: int = 12
    batch: int = 64
    lr: float = 2e-3
    lr_min: float = 2e-4
    lr_warmup_epochs: int = 2
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    arch_lr: float = 0.01
    kcr_weight: float = 1.0
    lam: float = 0.5
    gamma: float = 0.25
    m_land: int = 256
    x: float = 1.0
    tau_init: float = 4.5
    tau_decay: float = 0.95
    seed: int = 0
    split_weights: float = 0.7

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0 <= self.t_warm <= self.t_train:
            raise ConfigError(f"need 0 <= t_warm <= t_train (got {self.t_warm}, {self.t_train})")
        if self.t_search < 0:
            raise ConfigError("t_search must be >= 0")
        if not 0 < self.gamma <= 0.5:
            raise ConfigError(f"gamma must lie in (0, 0.5], got {self.gamma}")
        if self.m_land < 1 or self.batch < 1:
            raise ConfigError("m_land and batch must be >= 1")
        if not 0 < self.split_weights < 1:
            raise ConfigError("split_weights must lie in (0, 1)")
        if not 0 < self.tau_decay <= 1 or self.tau_init <= 0:
            raise ConfigError("need tau_init > 0 and tau_decay in (0, 1]")
        if self.x <= 0 or self.kcr_weight < 0 or self.lam < 0:
            raise ConfigError("need x > 0, kcr_weight >= 0, lam >= 0")

    def rank(self, n: int, d_feat: int) -> int:
        """Searched truncation rank ``ceil(gamma * min(n, d_feat))``."""
        return max(1, math.ceil(self.gamma * min(n, d_feat)))

    def lr_at(self, step: int, total: int, steps_per_epoch: int) -> float:
        """Linear rise from ``lr_min`` to ``lr`` over the warm-up epochs, then cosine back."""
        warm = self.lr_warmup_epochs * steps_per_epoch
        if step < warm:
            return self.lr_min + (self.lr - self.lr_min) * (step + 1) / warm
        span = max(total - warm, 1)
        frac = min((step - warm) / span, 1.0)
        return self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class DataSpec:
    classes: int = 4
    n: int = 2048
    n_val: int = 512
    image_side: int = 16
    noise: float = 0.3
    seed: int = 0
    data_dir: str | None = None

    def __post_init__(self):
        if self.n < self.classes:
            raise ConfigError("data.n must be at least the class count")


def _strict(cls, d, section):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass
class ConfigFile:
    model: ModelConfig = field(default_factory=ModelConfig)
    run: RunConfig = field(default_factory=RunConfig)
    data: DataSpec = field(default_factory=DataSpec)

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "model": asdict(self.model), "run": asdict(self.run), "data": asdict(self.data)}

    @classmethod
    def from_dict(cls, d: dict) -> "ConfigFile":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if d.get("schema") != SCHEMA:
            raise ConfigError(f"unsupported config schema {d.get('schema')!r} (expected {SCHEMA})")
        unknown = set(d) - {"schema", "model", "run", "data"}
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        return cls(
            model=_strict(ModelConfig, d.get("model", {}), "model"),
            run=_strict(RunConfig, d.get("run", {}), "run"),
            data=_strict(DataSpec, d.get("data", {}), "data"),
        )

    @classmethod
    def load(cls, path) -> "ConfigFile":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
