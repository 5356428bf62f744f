"""Experiment configuration as flat ``section.key=value`` lines.

Sections mirror nested dataclasses, e.g. ``train.attack.epsilon=0.0314``.
Lists are comma separated. ``#`` starts a comment.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackConfig
from .data import DatasetSpec
from .errors import ConfigError, ParseError
from .smoothing import SmoothingConfig
from .training import TrainConfig


@dataclass
class ModelConfig:
    arch: str = "mlp"
    hidden: list = field(default_factory=lambda: [128])
    channels: int = 16
    noise: str = "weight"
    noise_alpha: float = 0.25
    noise_learnable: bool = False
    init_seed: int = 0
    checkpoint: str = ""
    id: str = ""

    def __post_init__(self):
        if self.arch not in ("mlp", "cnn"):
            raise ConfigError(f"model.arch must be mlp or cnn, got {self.arch!r}")
        if self.noise not in ("none", "weight", "activation", "input"):
            raise ConfigError(f"model.noise must be none, weight, activation or input")


@dataclass
class SmoothingGrid:
    sigmas: list = field(default_factory=lambda: [0.0, 0.1, 0.2])
    Ms: list = field(default_factory=lambda: [1, 8])
    voting: str = "prediction"
    C: float = 0.5

    def __post_init__(self):
        if not self.sigmas or not self.Ms:
            raise ConfigError("smoothing.sigmas and smoothing.Ms must be non-empty")
        if min(self.sigmas) < 0 or min(self.Ms) < 1:
            raise ConfigError("smoothing grid needs sigma >= 0 and M >= 1")
        SmoothingConfig(M=max(self.Ms), sigma=max(self.sigmas), voting=self.voting, C=self.C)


@dataclass
class SweepConfig:
    families: list = field(default_factory=lambda: ["pgd", "epgd", "smoothadv"])
    ks: list = field(default_factory=lambda: [1, 2, 4, 8])
    M_bs: list = field(default_factory=lambda: [1, 8])
    epsilons: list = field(default_factory=lambda: [0.0, 2 / 255, 4 / 255, 8 / 255, 16 / 255])

    def __post_init__(self):
        for family in self.families:
            AttackConfig(family=family)
        if min(self.ks, default=1) < 1 or min(self.M_bs, default=1) < 1:
            raise ConfigError("sweep.ks and sweep.M_bs entries must be >= 1")
        if min(self.epsilons, default=0.0) < 0:
            raise ConfigError("sweep.epsilons must be non-negative")


@dataclass
class SVMConfig:
    dim: int = 10
    n: int = 200
    sigma: float = 0.1
    epsilon: float = 0.05
    separation: float = 8.0
    trials: int = 10_000
    repetitions: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    num_seeds: int = 1
    out: str = "out"
    threads: int = 1
    eval_limit: int = 0

    def __post_init__(self):
        if self.num_seeds < 1:
            raise ConfigError("run.num_seeds must be at least 1")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    smoothing: SmoothingGrid = field(default_factory=SmoothingGrid)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    svm: SVMConfig = field(default_factory=SVMConfig)
    run: RunConfig = field(default_factory=RunConfig)


# -- flat encoding ---------------------------------------------------------

def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse_scalar(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def _coerce(key: str, raw: str, current, annotation: str):
    raw = raw.strip()
    ann = str(annotation)
    try:
        if isinstance(current, bool) or ann == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError
        if isinstance(current, (list, tuple)) or ann.startswith(("list", "tuple")):
            items = [_parse_scalar(s.strip()) for s in raw.split(",") if s.strip()]
            if any(isinstance(i, float) for i in items):
                items = [float(i) for i in items]
            return tuple(items) if isinstance(current, tuple) else items
        if "None" in ann and raw.lower() == "none":
            return None
        if "float" in ann:
            return float(raw)
        if "int" in ann:
            return int(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None


def to_flat(obj, prefix="") -> dict:
    flat = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            flat.update(to_flat(value, key + "."))
        else:
            flat[key] = _format(value)
    return flat


def _assign(obj, path: list, raw: str, full: str):
    names = {f.name: f for f in dataclasses.fields(obj)}
    head = path[0]
    if head not in names:
        raise ConfigError(f"unknown config key {full!r}")
    current = getattr(obj, head)
    if dataclasses.is_dataclass(current):
        if len(path) == 1:
            raise ConfigError(f"config key {full!r} names a section, not a value")
        return dataclasses.replace(obj, **{head: _assign(current, path[1:], raw, full)})
    if len(path) != 1:
        raise ConfigError(f"unknown config key {full!r}")
    return dataclasses.replace(obj, **{head: _coerce(full, raw, current, names[head].type)})


def apply_overrides(cfg: ExperimentConfig, pairs: dict) -> ExperimentConfig:
    for key, raw in pairs.items():
        cfg = _assign(cfg, key.split("."), raw, key)
    return cfg


def parse_lines(text: str, source="<config>") -> dict:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value in {source}", f"line {lineno}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cfg = apply_overrides(cfg, parse_lines(p.read_text(encoding="utf-8"), str(p)))
    return apply_overrides(cfg, overrides or {})


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k}={v}\n" for k, v in to_flat(cfg).items())


def bundled_config(name: str = "tiny") -> Path:
    return Path(__file__).parent / "configs" / f"{name}.cfg"
