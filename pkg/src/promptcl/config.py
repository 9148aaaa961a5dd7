"""Experiment configuration: nested YAML sections, validation with line numbers, stable hashing.

A config file has a top-level ``seed`` plus optional ``synthetic``, ``backbone``,
``pretrain`` and ``train`` sections. Omitted keys take their defaults, and the
resolved config written next to every run lists all of them.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from .data import SyntheticSpec
from .objectives import CCLConfig
from .trainer import TrainConfig
from .vit import BackboneConfig

REQUIRED_FIELDS = ("seed",)


class ConfigError(ValueError):
    """Invalid config file; the message starts with ``file:line:`` when a position is known."""


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs and batch_size must be >= 1 and lr > 0")


# Section name -> dataclass. The seed lives at the top level only and is copied
# into the synthetic and train sections, so those keys are not accepted there.
SECTIONS = {"synthetic": SyntheticSpec, "backbone": BackboneConfig,
            "pretrain": PretrainConfig, "train": TrainConfig}
_SEEDED = ("synthetic", "train")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.synthetic.seed != self.seed or self.train.seed != self.seed:
            object.__setattr__(self, "synthetic", dataclasses.replace(self.synthetic, seed=self.seed))
            object.__setattr__(self, "train", dataclasses.replace(self.train, seed=self.seed))
        if (self.synthetic.image_size, self.synthetic.channels) != (self.backbone.image_size, self.backbone.channels):
            raise ValueError("synthetic and backbone disagree on image_size/channels")

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed))

    def with_train(self, **overrides) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, **overrides))

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            d = _section_dict(getattr(self, name))
            if name in _SEEDED:
                d.pop("seed")
            out[name] = d
        return out

    def config_hash(self) -> str:
        """Hash of everything except the seed, so seeds of one config share a prefix."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def backbone_key(self) -> str:
        """Cache key for the pretrained backbone: (backbone config, pretrain data and schedule, seed)."""
        d = {"backbone": _section_dict(self.backbone), "pretrain": _section_dict(self.pretrain),
             "synthetic": _section_dict(self.synthetic), "seed": self.seed}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def run_name(self) -> str:
        return f"{self.config_hash()[:12]}_seed{self.seed}"


def _section_dict(obj) -> Dict[str, Any]:
    d = dataclasses.asdict(obj)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def dump_config(cfg: ExperimentConfig) -> str:
    """YAML text listing every field, sections in a fixed order."""
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)


def write_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))


# -- parsing ---------------------------------------------------------------------------

def _line_index(node, prefix=()) -> Dict[tuple, int]:
    """Map key paths to 1-based line numbers using the composed YAML node tree."""
    lines: Dict[tuple, int] = {}
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = prefix + (key_node.value,)
            lines[path] = key_node.start_mark.line + 1
            lines.update(_line_index(value_node, path))
    return lines


def _check_value(default, value, where: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        kind = "a boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        kind = "an integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        kind = "a number"
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
        kind = "a string"
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        kind = "a list of integers"
        value = tuple(value) if ok else value
    else:  # pragma: no cover - every config field has one of the kinds above
        ok, kind = True, ""
    if not ok:
        raise ConfigError(f"{where}: expected {kind}, got {value!r}")
    return value


def _build(cls, raw: Any, path: tuple, at) -> Any:
    label = ".".join(path)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{at(path)}: section '{label}' must be a mapping")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    if len(path) == 1 and path[0] in _SEEDED:
        names.discard("seed")
    kwargs = {}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"{at(path + (key,))}: unknown field '{label}.{key}'")
        default = getattr(defaults, key)
        if isinstance(default, CCLConfig):
            kwargs[key] = _build(CCLConfig, value, path + (key,), at)
        else:
            kwargs[key] = _check_value(default, value, at(path + (key,)))
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{at(path)}: {exc}") from exc


def parse_config(text: str, source: str = "<config>", seed: Optional[int] = None) -> ExperimentConfig:
    """Parse YAML text; ``seed`` (e.g. from the command line) overrides the file's."""
    try:
        raw = yaml.safe_load(text)
        lines = _line_index(yaml.compose(text))
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        pos = f"{source}:{mark.line + 1}:{mark.column + 1}" if mark is not None else source
        raise ConfigError(f"{pos}: {getattr(exc, 'problem', None) or exc}") from exc
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")

    def at(path) -> str:
        for n in range(len(path), 0, -1):
            if tuple(path[:n]) in lines:
                return f"{source}:{lines[tuple(path[:n])]}"
        return source

    for key in raw:
        if key != "seed" and key not in SECTIONS:
            raise ConfigError(f"{at((key,))}: unknown section '{key}'")
    if seed is None:
        missing = [f for f in REQUIRED_FIELDS if f not in raw]
        if missing:
            raise ConfigError(f"{source}: missing required field '{missing[0]}'")
        seed = _check_value(0, raw["seed"], at(("seed",)))
    sections = {name: _build(cls, raw.get(name), (name,), at) for name, cls in SECTIONS.items()}
    try:
        return ExperimentConfig(seed=int(seed), **sections)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
    return parse_config(text, str(path), seed)
