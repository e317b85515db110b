"""Run configuration: nested dataclasses loaded from strictly validated JSON."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .keyframes import KeyframeConfig
from .models import EncoderConfig, ModelConfig
from .mucppo import AlgoConfig
from .planarenv import FPS, DatasetConfig, EnvConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration file or value."""


@dataclass
class RunConfig:
    version: int = SCHEMA_VERSION
    seed: int = 0
    iterations: int = 2000
    precision: int = 32
    checkpoint_every: int = 100
    dataset_path: str | None = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    keyframes: KeyframeConfig = field(default_factory=KeyframeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    algo: AlgoConfig = field(default_factory=AlgoConfig)

    def validate(self):
        if self.version != SCHEMA_VERSION:
            raise ConfigError(f"field version: unsupported schema version {self.version}")
        if self.precision not in (32, 64):
            raise ConfigError("field precision: must be 32 or 64")
        if self.iterations < 0 or self.checkpoint_every < 1:
            raise ConfigError("fields iterations/checkpoint_every must be non-negative/positive")
        for name in ("env", "keyframes", "algo"):
            try:
                getattr(self, name).validate()
            except ValueError as exc:
                raise ConfigError(f"field {name}: {exc}") from exc
        try:
            self.model.encoder_config(1)
        except ValueError as exc:
            raise ConfigError(f"field model.encoder: {exc}") from exc
        span = self.keyframes.max_keyframes * self.keyframes.interval_range[1]
        if not self.dataset_path and self.dataset.seconds * FPS < span:
            raise ConfigError(f"field dataset.seconds: clips of {self.dataset.seconds} s cannot hold "
                              f"{self.keyframes.max_keyframes} keyframes {self.keyframes.interval_range[1]} steps apart")
        if self.model.critic_input not in ("sequence", "pooled"):
            raise ConfigError(f"field model.critic_input: unknown value {self.model.critic_input!r}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **overrides):
        """Copy with dotted-path overrides, e.g. ``replace(**{"algo.num_envs": 64})``."""
        d = self.to_dict()
        for path, value in overrides.items():
            node = d
            *head, last = path.split(".")
            for key in head:
                node = node[key]
            if last not in node:
                raise ConfigError(f"unknown field {path}")
            node[last] = value
        return config_from_dict(d)


def _check_type(value, default, path):
    if default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"field {path}: expected string or null, got {type(value).__name__}")
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"field {path}: expected {type(default).__name__}, got {type(value).__name__}")
    return value


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"field {path or '<root>'}: expected an object")
    defaults = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"field {path + '.' if path else ''}{unknown[0]}: unknown key")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        default = getattr(defaults, name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, sub)
        else:
            kwargs[name] = _check_type(value, default, sub)
    return cls(**kwargs)


def config_from_dict(data) -> RunConfig:
    return _build(RunConfig, data, "").validate()


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def save_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        fh.write(cfg.to_json() + "\n")


def desk_config(**overrides) -> RunConfig:
    """Scaled-down defaults that train on a single CPU core."""
    cfg = RunConfig()
    cfg.iterations = 400
    cfg.model.encoder = EncoderConfig(num_layers=2, num_heads=1, model_dim=32, feedforward_dim=512)
    cfg.model.width_multiplier = 0.125
    cfg.model.mlp_dims = [512, 256]
    cfg.model.discriminator_dims = [128, 64]
    cfg.keyframes.max_keyframes = 3
    cfg.algo.num_envs = 64
    cfg.algo.learning_rate = 1e-3
    cfg.algo.disc_updates_per_epoch = 2
    cfg.algo.disc_batch_size = 256
    return cfg.replace(**overrides) if overrides else cfg.validate()
