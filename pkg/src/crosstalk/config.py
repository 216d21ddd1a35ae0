"""Flat key=value config files bound to typed dataclasses.

One ``key=value`` per line; blank lines and ``#`` comments are allowed.
Binding starts from the dataclass defaults, coerces values by the field's
annotated type, and rejects unknown or duplicate keys so typos fail loudly.
"""

from __future__ import annotations

import types
import typing
from dataclasses import fields

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv(text: str) -> dict:
    out: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {line_no}: empty key")
        if key in out:
            raise ConfigError(f"line {line_no}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_kv(path) -> dict:
    with open(path) as fh:
        return parse_kv(fh.read())


def _coerce(key: str, typ, raw: str):
    origin = typing.get_origin(typ)
    if origin is typing.Union or origin is types.UnionType:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if raw.lower() in ("", "none"):
            return None
        typ = args[0]
    try:
        if typ is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r} as {typ.__name__}")
    raise ConfigError(f"key {key!r}: unsupported field type {typ!r}")


def bind(cls, mapping: dict):
    """Instantiate ``cls`` from string values, starting at its defaults."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in mapping.items():
        if key not in names:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        kwargs[key] = _coerce(key, hints[key], raw)
    return cls(**kwargs)


def split_mapping(mapping: dict, *classes) -> list:
    """Partition flat keys among several dataclasses; unknown keys rejected."""
    buckets = [dict() for _ in classes]
    field_sets = [{f.name for f in fields(c)} for c in classes]
    for key, value in mapping.items():
        for bucket, names in zip(buckets, field_sets):
            if key in names:
                bucket[key] = value
                break
        else:
            owners = ", ".join(c.__name__ for c in classes)
            raise ConfigError(f"unknown key {key!r} (not a field of {owners})")
    return buckets


def to_kv(obj) -> str:
    """Serialize a dataclass back to key=value lines; None fields omitted."""
    lines = []
    for f in fields(obj):
        value = getattr(obj, f.name)
        if value is None:
            continue
        if isinstance(value, bool):
            value = int(value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"
