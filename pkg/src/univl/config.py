"""``key = value`` config files with line-accurate errors.

Grammar: one ``key = value`` per line; ``#`` starts a comment; blank lines are
ignored. Keys may be dotted (``model.hidden``) to address a section. Values
are coerced to the target dataclass field type; tuples are comma separated
(``tokens_per_clip = 6, 10``); booleans accept true/false/yes/no/1/0.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Dict, Tuple


class ConfigError(ValueError):
    def __init__(self, message: str, line: int = 0, source: str = "<config>"):
        where = f"{source}:{line}: " if line else f"{source}: "
        super().__init__(where + message)
        self.line = line


def parse_lines(text: str, source: str = "<config>") -> Dict[str, Tuple[str, int]]:
    """Returns ``{key: (raw_value, line_number)}``."""
    out: Dict[str, Tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", lineno, source)
        if key in out:
            raise ConfigError(f"duplicate key {key!r} (first on line {out[key][1]})", lineno, source)
        out[key] = (value, lineno)
    return out


def read_file(path) -> Dict[str, Tuple[str, int]]:
    path = Path(path)
    return parse_lines(path.read_text(encoding="utf-8"), str(path))


_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def _coerce(raw: str, tp, what: str, line: int, source: str):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin is tuple:
            args = typing.get_args(tp)
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce(p, args[0], what, line, source) for p in parts)
            if len(parts) != len(args):
                raise ValueError(raw)
            return tuple(_coerce(p, a, what, line, source) for p, a in zip(parts, args))
        if origin is typing.Union:
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if raw.lower() in ("none", ""):
                return None
            return _coerce(raw, args[0], what, line, source)
    except ValueError:
        raise ConfigError(f"{what}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}", line, source) from None
    raise ConfigError(f"{what}: unsupported field type {tp}", line, source)


def build(cls, entries: Dict[str, Tuple[str, int]], source: str = "<config>", prefix: str = ""):
    """Instantiate dataclass ``cls`` from the entries under ``prefix`` (unknown keys are errors)."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    lines = {}
    for key, (raw, line) in entries.items():
        if prefix:
            if not key.startswith(prefix):
                continue
            key = key[len(prefix):]
        if key not in names:
            raise ConfigError(f"unknown key {prefix + key!r}", line, source)
        kwargs[key] = _coerce(raw, hints[key], prefix + key, line, source)
        lines[key] = line
    try:
        return cls(**kwargs)
    except ValueError as exc:
        field_name = getattr(exc, "field", None)
        raise ConfigError(str(exc), lines.get(field_name, 0), source) from None


def dump(obj, prefix: str = "") -> str:
    """Canonical text form of a dataclass instance (round-trips through :func:`build`)."""
    out = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if isinstance(value, tuple):
            text = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            text = "true" if value else "false"
        elif value is None:
            text = "none"
        else:
            text = repr(value) if isinstance(value, float) else str(value)
        out.append(f"{prefix}{f.name} = {text}")
    return "\n".join(out) + "\n"


class FieldError(ValueError):
    """ValueError that names the offending field so config errors can point at its line."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
