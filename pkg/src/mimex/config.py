"""Experiment configuration: a strict YAML tree mapped onto dataclasses.

Unknown keys, wrong types and unknown registry names raise
:class:`ConfigError` naming the offending field path.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import yaml

from .autodiff import ContractError
from .engine import MimexConfig
from .envs import ENV_REGISTRY, SparsityLevel
from .masking import MaskSpec

EXPLORERS = ("mimex", "rnd", "icm", "noise", "none")
SEED_OFFSET_ENV = "MIMEX_SEED_OFFSET"


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    name: str = "ChainMDP"
    sparsity: str = "sparser"
    params: dict = field(default_factory=dict)


@dataclass
class TransformerSizes:
    encoder_dim: int = 128
    encoder_blocks: int = 4
    encoder_heads: int = 4
    decoder_dim: int = 64
    decoder_blocks: int = 1
    decoder_heads: int = 2
    mlp_ratio: float = 4.0


@dataclass
class PpoConfig:
    num_envs: int = 8
    horizon: int = 128
    epochs: int = 4
    minibatch_size: int = 256
    clip_eps: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    hidden: int = 64
    embed_dim: int = 32
    obs_norm_steps: int = 10000

    def validate(self) -> None:
        if self.clip_eps <= 0:
            raise ConfigError("ppo.clip_eps: must be > 0")
        for name in ("gamma", "lam"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"ppo.{name}: must lie in [0, 1]")
        for name in ("num_envs", "horizon", "epochs", "minibatch_size", "hidden", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ppo.{name}: must be >= 1")


@dataclass
class BaselineConfig:
    noise_scale: float = 0.1
    learning_rate: float = 1e-3
    feature_dim: int = 32
    hidden: int = 0
    batch_size: int = 256
    icm_forward_weight: float = 0.2


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    env: EnvConfig = field(default_factory=EnvConfig)
    explorer: str = "mimex"
    seeds: list = field(default_factory=lambda: list(range(7)))
    total_env_steps: int = 200_000
    eval_every: int = 10_000
    eval_episodes: int = 5
    mimex: MimexConfig = field(default_factory=MimexConfig)
    transformer: TransformerSizes = field(default_factory=TransformerSizes)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def validate(self) -> "ExperimentConfig":
        if self.env.name not in ENV_REGISTRY:
            raise ConfigError(f"env.name: unknown environment {self.env.name!r} (known: {', '.join(ENV_REGISTRY)})")
        try:
            SparsityLevel(self.env.sparsity)
        except ValueError:
            raise ConfigError(f"env.sparsity: {self.env.sparsity!r} is not one of dense, sparse, sparser") from None
        if self.explorer not in EXPLORERS:
            raise ConfigError(f"explorer: {self.explorer!r} is not one of {', '.join(EXPLORERS)}")
        if not self.seeds or not all(isinstance(s, int) for s in self.seeds):
            raise ConfigError("seeds: need a nonempty list of integers")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds: duplicate seed values")
        if self.total_env_steps < 1:
            raise ConfigError("total_env_steps: must be >= 1")
        if self.eval_every < 1 or self.eval_episodes < 1:
            raise ConfigError("eval_every/eval_episodes: must be >= 1")
        self.ppo.validate()
        t = self.transformer
        if t.encoder_dim % t.encoder_heads or t.decoder_dim % t.decoder_heads:
            raise ConfigError("transformer: each dim must be divisible by its head count")
        if self.baseline.noise_scale < 0:
            raise ConfigError("baseline.noise_scale: must be >= 0")
        return self


def _field_types(cls) -> dict[str, typing.Any]:
    return typing.get_type_hints(cls)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = _field_types(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in names:
            raise ConfigError(f"{where}: unknown key")
        kwargs[key] = _coerce(hints[key], value, where)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def _coerce(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if tp is MaskSpec:
        return _build(MaskSpec, value, where)
    origin = typing.get_origin(tp)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if tp is list or origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        return dict(value)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError:
            raise ConfigError(f"{where}: {value!r} is not one of {[m.value for m in tp]}") from None
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    try:
        cfg = _build(ExperimentConfig, data or {}, "")
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return config_from_dict(data or {})


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False, default_flow_style=None)


def effective_seeds(seeds) -> list[int]:
    """Apply the ``MIMEX_SEED_OFFSET`` shift, if set."""
    raw = os.environ.get(SEED_OFFSET_ENV, "").strip()
    if not raw:
        return list(seeds)
    try:
        offset = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_OFFSET_ENV}: expected an integer, got {raw!r}") from None
    return [s + offset for s in seeds]
