"""Flat ``key = value`` run configuration."""
from __future__ import annotations

from typing import Any, Dict, Mapping, Optional, Tuple


class ConfigError(ValueError):
    pass


def parse_text(text: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(f"line {n}: empty key")
        if k in out:
            raise ConfigError(f"line {n}: duplicate key {k!r}")
        out[k] = v
    return out


def _convert(key: str, raw: str, kind: type):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if kind is int:
            return int(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def resolve(schema: Mapping[str, Tuple[type, Any]], given: Mapping[str, str],
            overrides: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    """Apply defaults from ``schema`` (key -> (type, default)); reject unknown keys."""
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    out = {k: default for k, (_, default) in schema.items()}
    for k, raw in given.items():
        out[k] = _convert(k, raw, schema[k][0])
    for k, v in (overrides or {}).items():
        if v is not None:
            out[k] = v
    return out


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump(values: Mapping[str, Any]) -> str:
    return "".join(f"{k} = {format_value(values[k])}\n" for k in sorted(values))
