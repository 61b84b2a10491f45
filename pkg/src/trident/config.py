"""Strict conversion between nested config dataclasses and JSON documents."""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from enum import Enum
from pathlib import Path
from typing import Any, TypeVar

from .losses import ContractError

T = TypeVar("T")


class ConfigError(ContractError):
    pass


def to_dict(obj: Any) -> Any:
    """Materialise a (possibly nested) config dataclass into JSON-ready values."""
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def _union_args(tp) -> tuple | None:
    if typing.get_origin(tp) is typing.Union or isinstance(tp, types.UnionType):
        return typing.get_args(tp)
    return None


def _convert(tp, value: Any, where: str) -> Any:
    if value is None:
        return None
    args = _union_args(tp)
    if args is not None:
        candidates = [a for a in args if a is not type(None)]
        if isinstance(value, dict):
            for cand in candidates:
                if dataclasses.is_dataclass(cand) and set(value) <= {f.name for f in dataclasses.fields(cand)}:
                    return from_dict(cand, value, where)
            raise ConfigError(f"{where}: keys {sorted(value)} match none of {[c.__name__ for c in candidates]}")
        return _convert(candidates[0], value, where)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return from_dict(tp, value, where)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if typing.get_origin(tp) is tuple:
        return tuple(value)
    if tp is float and isinstance(value, int):
        return float(value)
    return value


def from_dict(cls: type[T], data: dict[str, Any], where: str = "") -> T:
    """Build ``cls`` from ``data``; unknown keys raise :class:`ConfigError`."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where or cls.__name__}: unknown keys {sorted(unknown)}")
    hints = typing.get_type_hints(cls)
    kwargs = {k: _convert(hints[k], v, f"{where or cls.__name__}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where or cls.__name__}: {exc}") from None


def merge(base: Any, override: Any) -> Any:
    """Overlay ``override`` on ``base`` key by key.

    A mapping whose keys are not a subset of the base mapping replaces it whole,
    so a switch of union member (or a typo) is left to :func:`from_dict` to judge.
    """
    if isinstance(base, dict) and isinstance(override, dict) and set(override) <= set(base):
        return {k: merge(base[k], override[k]) if k in override else base[k] for k in base}
    return override


def load_json(cls: type[T], path: str | Path) -> T:
    with Path(path).open() as fh:
        return from_dict(cls, json.load(fh))


def dump_json(obj: Any, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_dict(obj), indent=2, sort_keys=True) + "\n")
    return path
