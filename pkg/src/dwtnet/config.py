"""Flat ``key = value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import ConfigError


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


def _coerce(val: str, typ):
    typ = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if typ.startswith("bool"):
        if val.lower() in ("1", "true", "yes", "on"):
            return True
        if val.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {val!r}")
    if typ.startswith("int"):
        return int(val)
    if typ.startswith("float"):
        return float(val)
    return val


def apply(obj, values: dict[str, str], strict: bool = True):
    """Return a copy of dataclass ``obj`` with ``values`` applied (type-coerced)."""
    ftypes = {f.name: f.type for f in dataclasses.fields(obj)}
    updates = {}
    for key, val in values.items():
        if key not in ftypes:
            if strict:
                raise ConfigError(f"unknown config key {key!r}")
            continue
        try:
            updates[key] = _coerce(val, ftypes[key])
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return dataclasses.replace(obj, **updates)


def dump(*objs) -> str:
    lines = []
    for obj in objs:
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"


def load(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())
