"""Strict parsing helpers shared by the config-driven modules."""

from __future__ import annotations

from typing import Any, Iterable


class ConfigError(ValueError):
    pass


_MISSING = object()


def check_keys(doc: dict, allowed: Iterable[str], where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")


def require(doc: dict, key: str, where: str, default: Any = _MISSING) -> Any:
    if key in doc and doc[key] is not None:
        return doc[key]
    if default is _MISSING:
        raise ConfigError(f"{where}: missing required parameter {key!r}")
    return default
