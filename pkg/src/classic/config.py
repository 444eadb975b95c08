"""Sectioned ``key = value`` run configuration files.

Grammar::

    # comment            (also ';')
    [section]
    key = value

Sections are ``model``, ``training``, ``losses``, ``data`` and ``run``.
Values are parsed according to the type of the field they set. Lists are
comma separated. ``none`` clears an optional field.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .harness import RunConfig
from .losses import LossWeights
from .model import ModelConfig


class ConfigError(ValueError):
    """Raised for any malformed or incomplete configuration file."""

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.key = key
        self.line = line


@dataclass
class DataConfig:
    """Either a directory written by ``gen-data`` or parameters to generate one in memory."""

    dir: str | None = None
    names: tuple[str, ...] = ()
    synthetic: bool = False
    seed: int = 0
    tasks: int = 6
    per_task: int = 120
    flip: float = 0.3


@dataclass
class ExperimentConfig:
    run: RunConfig = field(default_factory=RunConfig)
    data: DataConfig = field(default_factory=DataConfig)


# config key -> field name where they differ or live on another object
_LOSS_KEYS = {"csc": "csc", "ced": "ced", "cks": "cks", "tau": "tau"}
_LOSS_RUN_KEYS = {"reduction": "loss_reduction", "teacher_grad": "teacher_grad"}
_TRAINING_KEYS = ("epochs", "batch_size", "lr", "mask_lr", "beta1", "beta2", "eps", "s_max",
                  "mask_threshold", "binary_masks", "protect_cutoff", "protect_rule",
                  "early_stop", "patience")
_RUN_KEYS = ("baseline", "mode", "ablate", "sequence_seeds", "seed")
SECTIONS = ("model", "training", "losses", "data", "run")


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _convert(raw: str, kind, key: str, line: int):
    """Parse ``raw`` into the annotated type ``kind``."""
    text = raw.strip()
    origin = typing.get_origin(kind)
    args = typing.get_args(kind)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() == "none":
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(text, inner[0], key, line)
    if origin is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        return tuple(_convert(t, args[0], key, line) for t in items)
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is str:
            if not text:
                raise ValueError("empty")
            return text
    except ValueError:
        raise ConfigError(f"cannot parse {text!r} as {getattr(kind, '__name__', kind)}", key, line) from None
    raise ConfigError(f"unsupported field type {kind}", key, line)


def _split_lines(text: str):
    section = None
    seen: set[tuple[str, str]] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", line=lineno)
            section = line[1:-1].strip().lower()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if section is None:
            raise ConfigError("key outside of any section", key, lineno)
        if (section, key) in seen:
            raise ConfigError("duplicate key", f"{section}.{key}", lineno)
        seen.add((section, key))
        yield section, key, value, lineno


def parse_config(text: str) -> ExperimentConfig:
    """Parse configuration text. Every field not mentioned keeps its default."""
    model_kw, run_kw, loss_kw, data_kw = {}, {}, {}, {}
    model_types = _field_types(ModelConfig)
    run_types = _field_types(RunConfig)
    loss_types = _field_types(LossWeights)
    data_types = _field_types(DataConfig)
    lines: dict[str, int] = {}
    for section, key, value, lineno in _split_lines(text):
        dotted = f"{section}.{key}"
        lines[section] = lineno
        if section == "model" and key in model_types:
            model_kw[key] = _convert(value, model_types[key], dotted, lineno)
        elif section == "training" and key in _TRAINING_KEYS:
            run_kw[key] = _convert(value, run_types[key], dotted, lineno)
        elif section == "run" and key in _RUN_KEYS:
            run_kw[key] = _convert(value, run_types[key], dotted, lineno)
        elif section == "losses" and key in _LOSS_KEYS:
            loss_kw[_LOSS_KEYS[key]] = _convert(value, loss_types[_LOSS_KEYS[key]], dotted, lineno)
        elif section == "losses" and key in _LOSS_RUN_KEYS:
            name = _LOSS_RUN_KEYS[key]
            run_kw[name] = _convert(value, run_types[name], dotted, lineno)
        elif section == "data" and key in data_types:
            data_kw[key] = _convert(value, data_types[key], dotted, lineno)
        else:
            raise ConfigError("unknown key", dotted, lineno)
    data = DataConfig(**data_kw)
    if data.dir is None and not data.synthetic:
        raise ConfigError("missing data source: set 'dir' or 'synthetic = true'", "data.dir",
                          lines.get("data"))
    try:
        run = RunConfig(model=ModelConfig(**model_kw), weights=LossWeights(**loss_kw), **run_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return ExperimentConfig(run=run, data=data)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text)


def run_config_from_dict(d: dict) -> RunConfig:
    """Inverse of ``RunConfig.to_dict``."""
    d = dict(d)
    d["model"] = ModelConfig(**d["model"])
    d["weights"] = LossWeights(**d["weights"])
    for key in ("ablate", "sequence_seeds"):
        d[key] = tuple(d[key])
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown run config fields {sorted(unknown)}")
    return RunConfig(**d)


def format_config(cfg: ExperimentConfig) -> str:
    """Render a config that ``parse_config`` reads back to an equal value."""

    def fmt(v) -> str:
        if v is None:
            return "none"
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return ", ".join(fmt(x) for x in v)
        return repr(v) if isinstance(v, float) else str(v)

    run = cfg.run
    out = ["[model]"]
    out += [f"{k} = {fmt(v)}" for k, v in dataclasses.asdict(run.model).items()]
    out += ["", "[training]"] + [f"{k} = {fmt(getattr(run, k))}" for k in _TRAINING_KEYS]
    out += ["", "[losses]"] + [f"{k} = {fmt(getattr(run.weights, f))}" for k, f in _LOSS_KEYS.items()]
    out += [f"{k} = {fmt(getattr(run, f))}" for k, f in _LOSS_RUN_KEYS.items()]
    out += ["", "[data]"] + [f"{k} = {fmt(v)}" for k, v in dataclasses.asdict(cfg.data).items()]
    out += ["", "[run]"] + [f"{k} = {fmt(getattr(run, k))}" for k in _RUN_KEYS]
    return "\n".join(out) + "\n"
