"""Flat ``key = value`` run configuration merging model, training, loss and data settings.

Keys are namespaced by prefix::

    # comments start with '#' or ';'
    model.num_heads = 4
    train.epochs = 50
    loss.diversity = 0.1
    data.source = synthetic-motif-real
    out = runs/demo

Unprefixed keys are accepted when they name exactly one field. Every
problem found while parsing or validating is collected and reported in one
:class:`ConfigError`.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetSpec
from .losses import LossWeights
from .model import ConfigError, SesmConfig
from .training import TrainConfig

SECTIONS: dict[str, type] = {
    "model": SesmConfig,
    "train": TrainConfig,
    "loss": LossWeights,
    "data": DatasetSpec,
}
_SKIP = {("train", "loss")}  # nested object, configured through loss.*


@dataclass
class RunConfig:
    model: SesmConfig = field(default_factory=SesmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    out: str | None = None

    @property
    def loss(self) -> LossWeights:
        return self.train.loss

    def validate(self) -> list[str]:
        errs = [f"model: {e}" for e in self.model.validate()]
        errs += [f"train: {e}" for e in self.train.validate()]  # includes the loss weights
        return errs

    def items(self) -> list[tuple[str, object]]:
        rows = []
        for sec, obj in (("model", self.model), ("train", self.train), ("loss", self.loss), ("data", self.data)):
            for f in dataclasses.fields(obj):
                if (sec, f.name) in _SKIP:
                    continue
                rows.append((f"{sec}.{f.name}", getattr(obj, f.name)))
        rows.append(("out", self.out))
        return rows

    def dumps(self) -> str:
        """Resolved config in the same format :func:`parse_config` reads."""
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _field_types(cls) -> dict[str, object]:
    return typing.get_type_hints(cls)


def _coerce(text: str, hint):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("none", "null", ""):
            return None
        return _coerce(text, inner[0])
    if origin is tuple:
        elem = args[0] if args else str
        parts = [p for p in text.split(",") if p.strip()]
        return tuple(_coerce(p, elem) for p in parts)
    if hint is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text


def _resolve_key(key: str) -> tuple[str, str] | None:
    if key == "out":
        return ("", "out")
    if "." in key:
        sec, name = key.split(".", 1)
        return (sec, name)
    owners = [sec for sec, cls in SECTIONS.items()
              if key in {f.name for f in dataclasses.fields(cls)} and (sec, key) not in _SKIP]
    if len(owners) == 1:
        return (owners[0], key)
    return None


def apply_overrides(cfg: RunConfig, pairs: dict[str, str], errors: list[str]) -> None:
    """Set ``key -> text`` pairs on ``cfg``; problems are appended to ``errors``."""
    targets = {"model": cfg.model, "train": cfg.train, "loss": cfg.train.loss, "data": cfg.data}
    for key, text in pairs.items():
        resolved = _resolve_key(key)
        if resolved is None:
            errors.append(f"{key}: unknown or ambiguous key (use a model./train./loss./data. prefix)")
            continue
        sec, name = resolved
        if sec == "":
            cfg.out = None if text.strip().lower() in ("", "none", "null") else text.strip()
            continue
        if sec not in SECTIONS:
            errors.append(f"{key}: unknown section {sec!r}")
            continue
        hints = _field_types(SECTIONS[sec])
        if name not in hints or (sec, name) in _SKIP:
            errors.append(f"{key}: unknown field")
            continue
        try:
            setattr(targets[sec], name, _coerce(text, hints[name]))
        except ValueError as exc:
            errors.append(f"{key}: {exc}")


def parse_pairs(text: str, source: str = "<config>") -> tuple[dict[str, str], list[str]]:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"), inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text, source=source)
    except configparser.Error as exc:
        return {}, [f"{source}: {exc}"]
    return dict(parser["run"]), []


def parse_config(text: str, overrides: dict[str, str] | None = None, source: str = "<config>") -> RunConfig:
    pairs, errors = parse_pairs(text, source)
    cfg = RunConfig()
    apply_overrides(cfg, pairs, errors)
    if overrides:
        apply_overrides(cfg, overrides, errors)
    errors += cfg.validate()
    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    if path is None:
        return parse_config("", overrides)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError([f"{p}: cannot read config ({exc.strerror})"]) from exc
    return parse_config(text, overrides, source=str(p))


def load_spec(path=None, overrides: dict[str, str] | None = None) -> DatasetSpec:
    """A dataset spec file: same format, keys with or without the ``data.`` prefix."""
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError([f"{path}: cannot read spec ({exc.strerror})"]) from exc
    pairs, errors = parse_pairs(text, str(path or "<spec>"))
    pairs.update(overrides or {})
    cfg = RunConfig()
    prefixed = {(k if k.startswith("data.") else f"data.{k}"): v for k, v in pairs.items()}
    apply_overrides(cfg, prefixed, errors)
    errors += [f"data: {e}" for e in cfg.data.validate()]
    if errors:
        raise ConfigError(errors)
    return cfg.data
