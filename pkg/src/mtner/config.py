"""``key=value`` text files for dataclass configs."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


def _coerce(raw: str, kind):
    origin = typing.get_origin(kind)
    if origin is typing.Union:
        args = [a for a in typing.get_args(kind) if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        return _coerce(raw, args[0])
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw.strip()


def parse_kv_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def load_kv(path) -> dict:
    return parse_kv_text(Path(path).read_text(encoding="utf-8"))


def build(cls, values: dict, strict: bool = True):
    """Instantiate dataclass ``cls`` from string or typed values."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in values.items():
        if key not in names:
            if strict:
                raise ValueError(f"unknown {cls.__name__} key {key!r}")
            continue
        kwargs[key] = _coerce(val, hints[key]) if isinstance(val, str) else val
    return cls(**kwargs)


def dump_kv(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        val = getattr(obj, f.name)
        if isinstance(val, float):
            val = repr(val)
        lines.append(f"{f.name}={val}")
    return "\n".join(lines) + "\n"
