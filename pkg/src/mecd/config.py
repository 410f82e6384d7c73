"""Flat ``key = value`` run configuration with section prefixes.

Precedence, lowest first: built-in defaults, config file, ``MECD_SEED``,
command-line ``--set`` overrides.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigError
from .model import ModelConfig
from .synth import SynthConfig
from .training import LossWeights, TrainConfig

CAUSAL_KEYS = ("front_door", "counterfactual")
PATH_KEYS = ("data", "checkpoint", "out")
TRUE = {"1", "true", "on", "yes"}
FALSE = {"0", "false", "off", "no"}


def parse_value(text: str, like):
    """Parse ``text`` into the type of the default ``like``."""
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low in TRUE:
                return True
            if low in FALSE:
                return False
            raise ValueError(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {type(like).__name__}") from None
    return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    paths: dict = field(default_factory=lambda: {k: "" for k in PATH_KEYS})

    def _target(self, key: str):
        section, _, name = key.partition(".")
        if section == "model" and name not in CAUSAL_KEYS:
            target = self.model
        elif section == "causal" and name in CAUSAL_KEYS:
            target = self.model
        elif section == "train" and name != "weights":
            target = self.train
        elif section == "loss":
            target = self.train.weights
        elif section == "synth":
            target = self.synth
        elif section == "paths" and name in PATH_KEYS:
            return self.paths, name
        else:
            raise ConfigError(f"unknown config key {key!r}")
        if name not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key {key!r}")
        return target, name

    def set(self, key: str, text: str) -> None:
        target, name = self._target(key.strip())
        if isinstance(target, dict):
            target[name] = text.strip()
        else:
            setattr(target, name, parse_value(text, getattr(target, name)))

    def get(self, key: str):
        target, name = self._target(key)
        return target[name] if isinstance(target, dict) else getattr(target, name)

    def items(self) -> list[tuple[str, str]]:
        out = []
        for f in fields(self.model):
            section = "causal" if f.name in CAUSAL_KEYS else "model"
            out.append((f"{section}.{f.name}", getattr(self.model, f.name)))
        out += [(f"train.{f.name}", getattr(self.train, f.name)) for f in fields(self.train) if f.name != "weights"]
        out += [(f"loss.{f.name}", getattr(self.train.weights, f.name)) for f in fields(LossWeights)]
        out += [(f"synth.{f.name}", getattr(self.synth, f.name)) for f in fields(self.synth)]
        out += [(f"paths.{k}", self.paths[k]) for k in PATH_KEYS]
        return [(k, format_value(v)) for k, v in sorted(out)]

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def apply_lines(self, text: str, source: str = "<config>") -> None:
        for no, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{no}: expected 'key = value', got {line!r}")
            key, _, value = line.partition("=")
            try:
                self.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{no}: {exc.args[0]}") from None

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.synth.validate()

    @classmethod
    def build(cls, config_file=None, overrides: Iterable[str] = (),
              env: Mapping[str, str] | None = None) -> "RunConfig":
        cfg = cls()
        if config_file:
            path = Path(config_file)
            if not path.is_file():
                raise ConfigError(f"config file {path} not found")
            cfg.apply_lines(path.read_text(encoding="utf-8"), str(path))
        env = os.environ if env is None else env
        if env.get("MECD_SEED"):
            cfg.set("train.seed", env["MECD_SEED"])
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, _, value = item.partition("=")
            cfg.set(key, value)
        return cfg
