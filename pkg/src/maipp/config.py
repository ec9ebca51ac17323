"""Plain ``key = value`` configuration files overriding dataclass defaults.

Keys are ``section.field`` (for example ``episode.n_agents`` or
``finetune.actor_lr``). ``#`` starts a comment. Values are parsed as int,
float, bool or comma-separated tuples, following the target field's type.
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_config(text: str, source: str = "<string>") -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"{source}:{lineno}: key {key!r} must be 'section.field'")
        section, name = key.split(".", 1)
        out.setdefault(section, {})[name] = value
    return out


def load_config(path: str | Path | None) -> dict[str, dict[str, str]]:
    if path is None:
        return {}
    p = Path(path)
    try:
        return parse_config(p.read_text(), str(p))
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from None


def _coerce(value: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [v.strip() for v in value.split(",") if v.strip()]
        inner = args[0] if args else float
        return tuple(_coerce(v, inner, key) for v in parts)
    if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
        if value.lower() == "none":
            return None
        for arg in typing.get_args(tp):
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, key)
            except ConfigError:
                continue
        raise ConfigError(f"{key}: cannot parse {value!r}")
    try:
        if tp is bool:
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {tp.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def apply_overrides(instance, section: str, config: dict[str, dict[str, str]]):
    """Copy of dataclass ``instance`` with ``config[section]`` values applied."""
    values = config.get(section, {})
    if not values:
        return instance
    hints = typing.get_type_hints(type(instance))
    names = {f.name for f in dataclasses.fields(instance)}
    changes = {}
    for name, raw in values.items():
        if name not in names:
            raise ConfigError(f"unknown key {section}.{name}")
        changes[name] = _coerce(raw, hints[name], f"{section}.{name}")
    try:
        return dataclasses.replace(instance, **changes)
    except ValueError as e:
        raise ConfigError(f"[{section}] {e}") from None
