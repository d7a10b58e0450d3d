"""Run configuration: an INI file with [run], [env], [model], [train] and [strategy] sections.

Parsing is strict: unknown sections or keys are errors, and every error names
the offending ``section.key``.
"""
from __future__ import annotations

import configparser
import io
import os
import typing
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from .envs import EnvSpec
from .policy import STRATEGIES, ModelConfig, OrderingStrategy
from .training import TrainConfig

OUTPUT_ENV_VAR = "PLMARL_OUTPUT_DIR"


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    total_env_steps: int = 38_400
    output_dir: str = "runs/default"
    eval_episodes: int = 1000
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.total_env_steps < 1:
            raise ValueError(f"total_env_steps: must be >= 1, got {self.total_env_steps}")
        if self.eval_episodes < 1:
            raise ValueError(f"eval_episodes: must be >= 1, got {self.eval_episodes}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every: must be >= 1, got {self.checkpoint_every}")


@dataclass(frozen=True)
class ModelSection:
    d_model: int = 64
    n_heads: int = 1
    n_blocks: int = 1
    scoring_layers: int = 2
    score_grad_to_encoder: bool = False
    dtype: str = "float64"

    def __post_init__(self):
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype: must be float64 or float32, got {self.dtype!r}")


@dataclass(frozen=True)
class StrategySection:
    kind: str = "learned-pl"
    fixed_order: Optional[tuple] = None

    def __post_init__(self):
        try:
            OrderingStrategy(self.kind, self.fixed_order)
        except ValueError as exc:
            key = "kind" if self.kind not in STRATEGIES else "fixed_order"
            raise ValueError(f"{key}: {exc}") from None


SECTIONS = {
    "run": RunSection,
    "env": EnvSpec,
    "model": ModelSection,
    "train": TrainConfig,
    "strategy": StrategySection,
}


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    env: EnvSpec = field(default_factory=EnvSpec)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    strategy: StrategySection = field(default_factory=StrategySection)

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(self.env.n_agents, self.env.obs_dim, self.env.n_actions, m.d_model, m.n_heads,
                           m.n_blocks, m.scoring_layers, m.score_grad_to_encoder)

    def ordering(self) -> OrderingStrategy:
        return OrderingStrategy(self.strategy.kind, self.strategy.fixed_order)

    @property
    def dtype(self):
        return np.float32 if self.model.dtype == "float32" else np.float64

    def output_dir(self) -> str:
        return os.environ.get(OUTPUT_ENV_VAR) or self.run.output_dir

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(_replace(self.run, seed=seed), self.env, self.model, self.train, self.strategy)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            section = getattr(self, name)
            cp[name] = {f.name: _format(getattr(section, f.name)) for f in fields(section)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _replace(obj, **kw):
    vals = {f.name: getattr(obj, f.name) for f in fields(obj)}
    vals.update(kw)
    return type(obj)(**vals)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, annotation, key: str):
    hint = annotation
    optional = False
    if typing.get_origin(hint) is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        optional, hint = True, args[0]
    text = raw.strip()
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if hint is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is tuple:
            return tuple(int(t) for t in text.replace(",", " ").split())
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def _hints(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__no_defaults__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError("config", f"malformed file: {exc}") from None
    for name in cp.sections():
        if name not in SECTIONS:
            raise ConfigError(name, "unknown section")
    built = {}
    for name, cls in SECTIONS.items():
        hints = _hints(cls)
        values = {}
        if cp.has_section(name):
            for key, raw in cp[name].items():
                if key not in hints:
                    raise ConfigError(f"{name}.{key}", "unknown key")
                values[key] = _parse(raw, hints[key], f"{name}.{key}")
        try:
            built[name] = cls(**values)
        except ValueError as exc:
            key, sep, msg = str(exc).partition(":")
            if not sep:
                raise ConfigError(name, str(exc)) from None
            raise ConfigError(f"{name}.{key}", msg.strip()) from None
    cfg = RunConfig(**built)
    if cfg.strategy.fixed_order is not None and len(cfg.strategy.fixed_order) != cfg.env.n_agents:
        raise ConfigError("strategy.fixed_order",
                          f"needs {cfg.env.n_agents} entries, got {len(cfg.strategy.fixed_order)}")
    try:
        cfg.model_config()
    except ValueError as exc:
        raise ConfigError("model", str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text)
