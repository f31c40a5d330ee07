"""Run configuration files.

Grammar, one assignment per line::

    # comment
    gen.n_train = 2000
    model.d_graph = 32
    train.mode = lkda

Keys carry a section prefix (``gen``, ``model``, ``train``) naming the
dataclass they configure.  Values are parsed according to the field type.
Unknown sections or fields are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import GenConfig
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = {"gen": GenConfig, "model": ModelConfig, "train": TrainConfig}


class ConfigKeyError(ValueError):
    def __init__(self, key: str, line: int | None = None, reason: str = "unknown key"):
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{reason}: {key!r}")
        self.key = key
        self.line = line


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def with_seed(self, seed: int) -> "RunConfig":
        """Override the training seed (model init and batching derive from it)."""
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))

    def validate(self) -> None:
        self.gen.validate()
        self.model.validate()
        self.train.validate()


def _parse_value(raw: str, kind, key: str, line: int):
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "1"):
                return True
            if low in ("false", "no", "0"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
    except ValueError:
        raise ConfigKeyError(key, line, f"cannot parse {raw!r} as {kind.__name__} for") from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "'\"":
        raw = raw[1:-1]
    return raw


def parse_config(text: str) -> RunConfig:
    updates: dict[str, dict] = {name: {} for name in SECTIONS}
    for n, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigKeyError(stripped, n, "expected 'key = value'")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigKeyError(key, n)
        cls = SECTIONS[section]
        hints = typing.get_type_hints(cls)
        if name not in hints:
            raise ConfigKeyError(key, n)
        if name in updates[section]:
            raise ConfigKeyError(key, n, "duplicate key")
        updates[section][name] = _parse_value(raw, hints[name], key, n)
    cfg = RunConfig(**{s: SECTIONS[s](**u) for s, u in updates.items()})
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        for k, v in dataclasses.asdict(getattr(cfg, section)).items():
            lines.append(f"{section}.{k} = {v}")
    return "\n".join(lines) + "\n"
