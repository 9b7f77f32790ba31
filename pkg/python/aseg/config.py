"""
Configuration plumbing for aseg.

Every config type is a dataclass defined next to the code it configures.
This module turns JSON data into those dataclasses (strictly: unknown keys
are errors), turns them back into JSON-ready dicts, and applies
command-line ``KEY=VALUE`` overrides.

Usage:
    cfg = from_dict(ModelConfig, json.load(fh)["model"], path="model")
    data = apply_override(data, "model.num_classes=6")
    json.dumps(to_dict(cfg))
"""

import dataclasses
import json
import os
import typing
from typing import Any, Dict, Mapping, Type, TypeVar, Union

from .exceptions import ConfigError, unknown_keys

T = TypeVar("T")

_NONE = type(None)


def _join(path: str, key: Any) -> str:
    return f"{path}.{key}" if path else str(key)


def from_dict(cls: Type[T], data: Any, path: str = "") -> T:
    """Build the dataclass ``cls`` from JSON data, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path or cls.__name__}: expected an object, got {type(data).__name__}")

    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}  # type: ignore[arg-type]
    unknown = set(data) - names
    if unknown:
        raise unknown_keys(path, unknown)

    kwargs = {key: _coerce(hints[key], value, _join(path, key)) for key, value in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def _coerce(tp: Any, value: Any, path: str) -> Any:
    if tp is Any:
        return value

    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if origin is Union:
        if value is None and _NONE in args:
            return None
        candidates = [a for a in args if a is not _NONE]
        errors = []
        for candidate in candidates:
            try:
                return _coerce(candidate, value, path)
            except ConfigError as exc:
                errors.append(exc.detail)
        raise ConfigError("; ".join(errors))

    if origin is typing.Literal:
        if value not in args:
            raise ConfigError(f"{path}: expected one of {list(args)}, got {value!r}")
        return value

    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)

    if origin in (list, typing.List):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        (item_tp,) = args or (Any,)
        return [_coerce(item_tp, v, _join(path, i)) for i, v in enumerate(value)]

    if origin in (tuple, typing.Tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, _join(path, i)) for i, v in enumerate(value))
        if args and len(args) != len(value):
            raise ConfigError(f"{path}: expected {len(args)} items, got {len(value)}")
        return tuple(_coerce(a, v, _join(path, i)) for i, (a, v) in enumerate(zip(args, value)))

    if origin in (dict, typing.Dict):
        if not isinstance(value, Mapping):
            raise ConfigError(f"{path}: expected an object, got {value!r}")
        val_tp = args[1] if args else Any
        return {str(k): _coerce(val_tp, v, _join(path, k)) for k, v in value.items()}

    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def to_dict(obj: Any) -> Any:
    """JSON-ready form of a config dataclass (tuples become lists)."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    if isinstance(obj, dict):
        return {k: to_dict(v) for k, v in obj.items()}
    return obj


def apply_override(data: Dict[str, Any], expr: str) -> Dict[str, Any]:
    """Set ``a.b.c=VALUE`` in nested JSON data; VALUE is JSON or a bare string.

    Keys are not validated here; ``from_dict`` rejects unknown ones later so
    the error names the full dotted path.
    """
    if "=" not in expr:
        raise ConfigError(f"override must look like KEY=VALUE, got {expr!r}")
    key, raw = expr.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override has an empty key: {expr!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw

    node = data
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = node[part] = {}
        elif not isinstance(child, dict):
            raise ConfigError(f"override {key!r}: {part!r} is not a section")
        node = child
    node[parts[-1]] = value
    return data


def require(condition: bool, message: str) -> None:
    """Raise ConfigError with ``message`` unless ``condition`` holds."""
    if not condition:
        raise ConfigError(message)


def worker_threads() -> int:
    """Worker thread cap from ASEG_THREADS (default: min(4, cpu count))."""
    raw = os.environ.get("ASEG_THREADS")
    if raw is None or raw == "":
        return max(1, min(4, os.cpu_count() or 1))
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"ASEG_THREADS must be a positive integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"ASEG_THREADS must be a positive integer, got {raw!r}")
    return value
