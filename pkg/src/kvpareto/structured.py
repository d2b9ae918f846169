"""YAML mapping loader with key validation and source locations."""
from __future__ import annotations

import os
from typing import Any, Iterable

import yaml


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None, column: int | None = None):
        self.path, self.line, self.column = path, line, column
        where = path or "<input>"
        if line is not None:
            where += f":{line}:{column}"
        super().__init__(f"{where}: {message}")


def _mark(node) -> tuple[int, int]:
    return node.start_mark.line + 1, node.start_mark.column + 1


def _check_keys(node, allowed: set[str], path: str, nested: dict[str, Iterable[str]]) -> None:
    for key_node, value_node in node.value:
        key = key_node.value
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} (allowed: {', '.join(sorted(allowed))})",
                              path, *_mark(key_node))
        if key in nested:
            if not isinstance(value_node, yaml.MappingNode):
                raise ConfigError(f"{key!r} must be a mapping", path, *_mark(value_node))
            _check_keys(value_node, set(nested[key]), path, {})


def load_mapping(source: str | os.PathLike, allowed: Iterable[str], required: Iterable[str] = (),
                 *, text: str | None = None, nested: dict[str, Iterable[str]] | None = None) -> dict[str, Any]:
    """Parse a top-level YAML mapping, rejecting unknown or missing keys.

    ``nested`` lists the allowed keys of sub-mappings. Errors carry 1-based
    line and column numbers.
    """
    path = os.fspath(source)
    if text is None:
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as e:
            raise ConfigError(f"cannot read file ({e.strerror})", path) from None
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.load(text, Loader=yaml.SafeLoader)
    except yaml.MarkedYAMLError as e:
        m = e.problem_mark
        raise ConfigError(e.problem or "syntax error", path,
                          m.line + 1 if m else None, m.column + 1 if m else None) from None
    if node is None:
        raise ConfigError("document is empty", path)
    if not isinstance(node, yaml.MappingNode) or not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", path, *_mark(node))
    _check_keys(node, set(allowed), path, nested or {})
    missing = [k for k in required if k not in data]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}", path, 1, 1)
    return data


def value_location(text: str, *keys: str) -> tuple[int | None, int | None]:
    """Line/column of the value under a key path, for errors raised after parsing."""
    node = yaml.compose(text, Loader=yaml.SafeLoader)
    for key in keys:
        if not isinstance(node, yaml.MappingNode):
            return None, None
        node = next((v for k, v in node.value if k.value == key), None)
        if node is None:
            return None, None
    return _mark(node)
