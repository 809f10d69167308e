"""YAML run configuration with line-accurate diagnostics."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .dataset import DataConfig
from .errors import ConfigError, EcgMoeError
from .model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class PathsConfig:
    out_dir: str = "runs/standard"
    data_dir: str | None = None
    checkpoint: str | None = None

    def resolve(self, out_override=None):
        out = Path(out_override or self.out_dir)
        data = Path(self.data_dir) if self.data_dir and not out_override else out / "data"
        ckpt = Path(self.checkpoint) if self.checkpoint and not out_override else out / "model.ckpt"
        return out, data, ckpt


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def with_seed(self, seed):
        """Override the training seed and the parameter-initialisation seed."""
        return dataclasses.replace(
            self,
            model=dataclasses.replace(self.model, init_seed=seed),
            train=dataclasses.replace(self.train, seed=seed),
        )


SECTIONS = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig, "paths": PathsConfig}


def _to_python(node):
    """Plain Python value plus a {key path: line} map built from a composed YAML node."""
    lines = {}

    def walk(n, path):
        lines.setdefault(path, n.start_mark.line + 1)
        if isinstance(n, yaml.MappingNode):
            out = {}
            for k, v in n.value:
                key = str(k.value)
                lines[path + (key,)] = k.start_mark.line + 1
                out[key] = walk(v, path + (key,))
            return out
        if isinstance(n, yaml.SequenceNode):
            return [walk(v, path + (i,)) for i, v in enumerate(n.value)]
        return yaml.safe_load(yaml.serialize(n))

    return walk(node, ()), lines


def _build_section(name, cls, values, lines):
    fields_ = {f.name for f in dataclasses.fields(cls)}
    where = lines.get((name,))
    if values is None:
        values = {}
    if not isinstance(values, dict):
        raise ConfigError("section must be a mapping", name, where)
    for key in values:
        if key not in fields_:
            raise ConfigError(f"unknown key; expected one of {sorted(fields_)}", f"{name}.{key}",
                              lines.get((name, key)))
    # Localise the first bad field by trying each one on top of the defaults.
    for key, value in values.items():
        try:
            cls(**{key: value})
        except (EcgMoeError, TypeError, ValueError, KeyError) as exc:
            raise ConfigError(str(exc), f"{name}.{key}", lines.get((name, key))) from None
    try:
        return cls(**values)
    except (EcgMoeError, TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc), name, where) from None


def parse_config(text, source="<config>"):
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"{source}: not valid YAML ({getattr(exc, 'problem', exc)})", None,
                          mark.line + 1 if mark else None) from None
    if node is None:
        return RunConfig()
    data, lines = _to_python(node)
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping", None, 1)
    for key in data:
        if key not in SECTIONS:
            raise ConfigError(f"unknown section; expected one of {sorted(SECTIONS)}", key, lines.get((key,)))
    built = {name: _build_section(name, cls, data.get(name), lines) for name, cls in SECTIONS.items()}
    return RunConfig(**built)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
