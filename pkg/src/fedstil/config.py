"""Experiment configuration and its INI-style text format.

Sections mirror :class:`ExperimentConfig`::

    [stream]      num_clients, num_rounds, num_identities, raw_dim, ...
    [shapes]      proto_dim, hidden_dim, num_labels
    [training]    epochs, batch_size, lr, weight_decay, patience, tie_weight,
                  rehearsal_fraction, betas, eps, train_alpha
    [server]      forgetting_ratio, window, temperature, include_self
    [memory]      budget, per_identity_quota
    [experiment]  strategy, eval_stride, seed, out_dir, stream_file

Any key can be overridden from the environment as ``FEDSTIL_<SECTION>_<KEY>``
(upper case), e.g. ``FEDSTIL_TRAINING_LR=0.01``.
"""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field

from .client import TrainConfig
from .errors import ConfigError, FedStilError
from .model import LayerShapes
from .stream import StreamConfig

STRATEGIES = ("fedstil", "fedavg", "local", "fedstil_no_st", "fedstil_no_rehearsal",
              "fedstil_no_tying")
ENV_PREFIX = "FEDSTIL_"


@dataclass(frozen=True)
class ServerConfig:
    forgetting_ratio: float = 0.5
    window: int = 5
    temperature: float = 1.0
    include_self: bool = False


@dataclass(frozen=True)
class MemoryConfig:
    budget: int = 512
    per_identity_quota: int = 4


@dataclass(frozen=True)
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    shapes: LayerShapes = field(default_factory=LayerShapes)
    training: TrainConfig = field(default_factory=TrainConfig)
    server: ServerConfig = field(default_factory=ServerConfig)
    memory: MemoryConfig = field(default_factory=MemoryConfig)
    strategy: str = "fedstil"
    eval_stride: int = 1
    seed: int = 0
    out_dir: str = "runs/default"
    stream_file: str = ""

    def validate(self) -> "ExperimentConfig":
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {', '.join(STRATEGIES)}")
        if self.eval_stride < 1:
            raise ConfigError("eval_stride must be >= 1")
        if not self.stream_file and self.shapes.num_labels != self.stream.num_identities:
            raise ConfigError(f"shapes.num_labels ({self.shapes.num_labels}) must equal "
                              f"stream.num_identities ({self.stream.num_identities})")
        t = self.training
        if t.epochs < 0 or t.batch_size < 1 or t.patience < 1:
            raise ConfigError("training needs epochs >= 0, batch_size >= 1, patience >= 1")
        if t.lr <= 0 or t.weight_decay < 0 or t.tie_weight < 0:
            raise ConfigError("training needs lr > 0 and non-negative weight_decay/tie_weight")
        if not 0.0 <= t.rehearsal_fraction < 1.0:
            raise ConfigError("training.rehearsal_fraction must lie in [0, 1)")
        s = self.server
        if not 0.0 < s.forgetting_ratio < 1.0:
            raise ConfigError("server.forgetting_ratio must lie in (0, 1)")
        if s.window < 0 or s.temperature <= 0:
            raise ConfigError("server needs window >= 0 and temperature > 0")
        if self.memory.budget < 1 or self.memory.per_identity_quota < 1:
            raise ConfigError("memory budget and quota must be positive")
        return self

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment on a different seed (model init, sampling and stream)."""
        return dataclasses.replace(self, seed=seed,
                                   stream=dataclasses.replace(self.stream, seed=seed))


_SECTIONS = {"stream": StreamConfig, "shapes": LayerShapes, "training": TrainConfig,
             "server": ServerConfig, "memory": MemoryConfig}
_TOP_LEVEL = ("strategy", "eval_stride", "seed", "out_dir", "stream_file")


def _parse_value(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.split(","))
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    return str(v)


def from_mapping(sections: dict, env=None) -> ExperimentConfig:
    """Build a config from ``{section: {key: text}}`` plus environment overrides."""
    env = os.environ if env is None else env
    sections = {k.lower(): dict(v) for k, v in sections.items()}
    for name, value in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section in _SECTIONS or section == "experiment":
            sections.setdefault(section, {})[key] = value

    unknown = set(sections) - set(_SECTIONS) - {"experiment"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")

    parts = {}
    for section, cls in _SECTIONS.items():
        defaults = cls() if section != "shapes" else LayerShapes()
        given = sections.get(section, {})
        names = {f.name for f in dataclasses.fields(cls)}
        bad = set(given) - names
        if bad:
            raise ConfigError(f"[{section}] unknown key(s): {', '.join(sorted(bad))}")
        kwargs = {k: _parse_value(v, getattr(defaults, k), f"[{section}] {k}") for k, v in given.items()}
        if section == "shapes" and "num_labels" not in kwargs:
            stream_ids = sections.get("stream", {}).get("num_identities")
            kwargs["num_labels"] = int(stream_ids) if stream_ids else StreamConfig().num_identities
        try:
            parts[section] = cls(**kwargs)
        except (FedStilError, TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from None

    top = sections.get("experiment", {})
    bad = set(top) - set(_TOP_LEVEL)
    if bad:
        raise ConfigError(f"[experiment] unknown key(s): {', '.join(sorted(bad))}")
    base = ExperimentConfig()
    kwargs = {k: _parse_value(v, getattr(base, k), f"[experiment] {k}") for k, v in top.items()}
    return ExperimentConfig(**parts, **kwargs).validate()


def load_config(path, env=None) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str.lower
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_mapping({s: dict(parser[s]) for s in parser.sections()}, env=env)


def to_ini(cfg: ExperimentConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    lines.append("[experiment]")
    for key in _TOP_LEVEL:
        lines.append(f"{key} = {_format_value(getattr(cfg, key))}")
    return "\n".join(lines) + "\n"


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(to_ini(cfg))
