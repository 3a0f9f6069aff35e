"""Run configuration: ``key = value`` lines under ``[section]`` headers.

Every key has a default; unknown sections or keys are rejected so typos fail
loudly. ``dumps(loads(text))`` is a fixed point.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from typing import Optional, get_type_hints


@dataclass
class ModelSection:
    size_tag: str = "custom"
    layers: int = 2
    hidden_d: int = 32
    patch: int = 2
    ssm_state_n: int = 16
    delta_rank: Optional[int] = None
    conv_width: int = 4
    freq_dim: int = 64
    adaln: bool = True
    class_token: bool = True


@dataclass
class DiffusionSection:
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    cfg_dropout: float = 0.1


@dataclass
class OptimizerSection:
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256
    steps: int = 400000


@dataclass
class TrainSection:
    seed: int = 0
    ema_decay: float = 0.9999
    hflip: bool = True
    log_every: int = 10
    ckpt_every: int = 1000
    output_dir: str = "runs/default"
    ckpt_dtype: str = "f64"


@dataclass
class DataSection:
    name: str = "two_mode_latent"
    path: str = ""
    mu: float = 0.8
    sigma: float = 0.1


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)

    def section_names(self):
        return [f.name for f in fields(self)]


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if typ is Optional[int]:
        return None if raw.lower() in ("none", "") else int(raw)
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig()
    valid = cfg.section_names()
    for section in parser.sections():
        if section not in valid:
            raise ConfigError(f"unknown section [{section}]; valid sections: {valid}")
        obj = getattr(cfg, section)
        hints = get_type_hints(type(obj))
        for key, raw in parser.items(section):
            if key not in hints:
                raise ConfigError(f"unknown key {key!r} in [{section}]; valid keys: {sorted(hints)}")
            try:
                setattr(obj, key, _parse_value(raw, hints[key]))
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return cfg


def load(path: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def dumps(cfg: RunConfig) -> str:
    lines = []
    for name in cfg.section_names():
        obj = getattr(cfg, name)
        lines.append(f"[{name}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def replace(cfg: RunConfig, **sections) -> RunConfig:
    """Copy of ``cfg`` with ``section={key: value}`` overrides applied."""
    out = loads(dumps(cfg))
    for name, updates in sections.items():
        setattr(out, name, dataclasses.replace(getattr(out, name), **updates))
    return out
