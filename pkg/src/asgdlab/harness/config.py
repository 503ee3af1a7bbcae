"""Experiment configuration: flat ``key = value`` files merged with CLI flags."""

from __future__ import annotations

import os
from dataclasses import dataclass, fields
from pathlib import Path

from ..asgd import AGGREGATIONS
from ..parallel import BACKENDS

OPTIMIZERS = ("batch", "sgd", "minibatch", "simuparallel", "asgd")
OUTPUT_ENV = "ASGDLAB_OUTPUT_DIR"
DEFAULT_OUTPUT = "asgdlab-out"


class ConfigError(ValueError):
    """Bad configuration: unknown keys, unparsable values, out-of-range numbers."""


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    optimizer: str = "asgd"
    dataset: str | None = None
    T: int = 100
    epsilon: float | None = None
    b: int = 500
    n: int = 8
    seed: int = 0
    repetitions: int = 10
    k: int | None = None
    backend: str = "deterministic"
    fanout: int = 1
    partial_fraction: float = 0.5
    buffers: int | None = None
    silent: bool = False
    final_aggregation: str = "first-worker"
    race_probability: float = 0.0
    objective: bool = True
    name: str | None = None
    output_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {', '.join(OPTIMIZERS)}; got {self.optimizer!r}")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {', '.join(BACKENDS)}; got {self.backend!r}")
        if self.final_aggregation not in AGGREGATIONS:
            raise ConfigError(f"final_aggregation must be one of {', '.join(AGGREGATIONS)}")
        if self.dataset is None:
            raise ConfigError("no dataset given")
        if self.epsilon is None or not self.epsilon > 0:
            raise ConfigError("epsilon must be given and > 0")
        for key in ("T", "b", "n", "repetitions"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.fanout < 0:
            raise ConfigError("fanout must be >= 0")
        if not 0 < self.partial_fraction <= 1:
            raise ConfigError("partial_fraction must be in (0, 1]")
        if not 0 <= self.race_probability <= 1:
            raise ConfigError("race_probability must be in [0, 1]")
        if self.buffers is not None and self.buffers < 1:
            raise ConfigError("buffers must be >= 1")
        return self

    @property
    def label(self) -> str:
        return self.name or self.optimizer


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}


def _coerce(key: str, text: str):
    kind = _FIELDS[key].type
    if text.strip().lower() in ("", "none") and "None" in kind:
        return None
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
        if kind.startswith("bool"):
            return _bool(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc
    return text.strip()


def parse_config_text(text: str) -> dict:
    """``key = value`` per line; ``#`` starts a comment; blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config_file(path: str | os.PathLike) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from exc
    return parse_config_text(text)


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """File values first, then every override that is not ``None``."""
    values = dict(file_values or {})
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = set(values) - set(_FIELDS)
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(sorted(unknown))}")
    return ExperimentConfig(**values).validate()


def resolve_output_dir(flag: str | None = None, configured: str | None = None) -> Path:
    """Flag beats the environment variable, which beats the config file."""
    chosen = flag or os.environ.get(OUTPUT_ENV) or configured or DEFAULT_OUTPUT
    return Path(chosen)


def output_path(out_dir: Path, name: str) -> Path:
    """Place an artifact under ``out_dir``; names escaping it are rejected."""
    root = out_dir.resolve()
    target = (root / name).resolve()
    if target != root and root not in target.parents:
        raise ConfigError(f"output {name!r} would land outside the output directory {out_dir}")
    return target
