"""Flat ``key = value`` run configuration.

Precedence: built-in defaults < config file < command-line overrides.
Unknown keys and out-of-range values are rejected before any work starts.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields

from .trainer import TrainConfig
from .vqaenv import EnvSpec

CONFIG_FORMAT = "tgpolab-config v1"


@dataclass
class RunConfig(TrainConfig):
    corpus_size: int = 2000
    eval_size: int = 400
    temporal_ratio: float = 0.5
    max_options: int = 4
    out_dir: str = "runs/default"

    def validate(self) -> None:
        problems = []
        try:
            super().validate()
        except ValueError as exc:
            problems.append(str(exc).removeprefix("invalid config: "))
        if self.corpus_size < 1:
            problems.append("corpus_size: must be >= 1")
        if self.eval_size < 1:
            problems.append("eval_size: must be >= 1")
        if not 0.0 <= self.temporal_ratio <= 1.0:
            problems.append("temporal_ratio: must lie in [0, 1]")
        if not 2 <= self.max_options <= 4:
            problems.append("max_options: must lie in [2, 4]")
        if self.temporal_ratio > 0 and self.video_len < 2:
            problems.append("video_len: temporal tasks need at least 2 frames")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))

    @property
    def env(self) -> EnvSpec:
        return EnvSpec(self.alphabet_size, self.video_len, self.max_options)

    def resolve(self, path: str) -> str:
        """Paths in the config are relative to ``out_dir``."""
        return path if os.path.isabs(path) else os.path.join(self.out_dir, path)

    @property
    def train_path(self) -> str:
        return self.resolve(self.train_corpus)

    @property
    def eval_path(self) -> str:
        return self.resolve(self.eval_corpus)


_TYPES = {"int": int, "float": float, "str": str}


def field_types() -> dict[str, type]:
    return {f.name: _TYPES[f.type if isinstance(f.type, str) else f.type.__name__] for f in fields(RunConfig)}


def coerce(key: str, raw) -> object:
    types = field_types()
    if key not in types:
        raise ValueError(f"unknown config key {key!r}")
    typ = types[key]
    if isinstance(raw, typ) and not (typ is float and isinstance(raw, bool)):
        return raw
    try:
        if typ is int:
            value = float(raw)
            if not value.is_integer():
                raise ValueError
            return int(value)
        return typ(raw)
    except (TypeError, ValueError):
        raise ValueError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None


def parse_text(text: str) -> dict[str, object]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        out[key] = coerce(key, raw)
    return out


def build(overrides: dict | None = None, path: str | None = None) -> RunConfig:
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_text(fh.read()))
    for key, raw in (overrides or {}).items():
        values[key] = coerce(key, raw)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def dump(cfg: RunConfig) -> str:
    lines = [f"# {CONFIG_FORMAT}"]
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {value!r}" if isinstance(value, float) else f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def train_config(cfg: RunConfig, **changes) -> RunConfig:
    """A copy with ``changes`` applied and corpus paths pinned to ``cfg``'s files."""
    out = dataclasses.replace(cfg, **changes)
    out.train_corpus = os.path.abspath(cfg.train_path)
    out.eval_corpus = os.path.abspath(cfg.eval_path)
    return out
