"""Flat ``key = value`` text files shared by architecture configs, scene specs and run manifests.

Format: one pair per line, ``#`` starts a comment, blank lines ignored, lists are
comma separated. Keys are unique within a file.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable

from rsnet.errors import ConfigError

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


class TextConfig:
    """Parsed pairs plus typed getters that remember which keys were consumed."""

    def __init__(self, pairs: dict[str, str], lines: dict[str, int], source: str):
        self._pairs = pairs
        self._lines = lines
        self.source = source
        self._used: set[str] = set()

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "TextConfig":
        pairs: dict[str, str] = {}
        lines: dict[str, int] = {}
        for number, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{source}:{number}: empty key")
            if key in pairs:
                raise ConfigError(f"{source}:{number}: duplicate key '{key}' (first on line {lines[key]})")
            pairs[key] = value
            lines[key] = number
        return cls(pairs, lines, source)

    @classmethod
    def read(cls, path: str | Path) -> "TextConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err.strerror or err}") from err
        return cls.parse(text, source=str(path))

    def __contains__(self, key: str) -> bool:
        return key in self._pairs

    def _where(self, key: str) -> str:
        line = self._lines.get(key)
        return f"{self.source}:{line}" if line else self.source

    def _raw(self, key: str, default: str | None) -> str:
        self._used.add(key)
        if key in self._pairs:
            return self._pairs[key]
        if default is None:
            raise ConfigError(f"{self.source}: missing required key '{key}'")
        return default

    def get_str(self, key: str, default: str | None = None) -> str:
        return self._raw(key, default)

    def get_int(self, key: str, default: int | None = None) -> int:
        raw = self._raw(key, None if default is None else str(default))
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{self._where(key)}: '{key}' must be an integer, got {raw!r}") from None

    def get_float(self, key: str, default: float | None = None) -> float:
        raw = self._raw(key, None if default is None else repr(default))
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{self._where(key)}: '{key}' must be a number, got {raw!r}") from None

    def get_bool(self, key: str, default: bool | None = None) -> bool:
        raw = self._raw(key, None if default is None else str(default).lower()).lower()
        if raw in _TRUE:
            return True
        if raw in _FALSE:
            return False
        raise ConfigError(f"{self._where(key)}: '{key}' must be true or false, got {raw!r}")

    def get_choice(self, key: str, choices: Iterable[str], default: str | None = None) -> str:
        choices = tuple(choices)
        raw = self._raw(key, default)
        if raw not in choices:
            raise ConfigError(f"{self._where(key)}: '{key}' must be one of {'|'.join(choices)}, got {raw!r}")
        return raw

    def get_int_list(self, key: str, default: Iterable[int] | None = None) -> tuple[int, ...]:
        fallback = None if default is None else ", ".join(str(v) for v in default)
        raw = self._raw(key, fallback)
        try:
            return tuple(int(part) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"{self._where(key)}: '{key}' must be a comma list of integers, got {raw!r}") from None

    def get_float_list(self, key: str, default: Iterable[float] | None = None) -> tuple[float, ...]:
        fallback = None if default is None else ", ".join(repr(v) for v in default)
        raw = self._raw(key, fallback)
        try:
            return tuple(float(part) for part in raw.split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"{self._where(key)}: '{key}' must be a comma list of numbers, got {raw!r}") from None

    def finish(self) -> None:
        """Reject keys nobody asked for (typos would otherwise be silently ignored)."""
        unknown = sorted(set(self._pairs) - self._used)
        if unknown:
            where = ", ".join(f"'{key}' ({self._where(key)})" for key in unknown)
            raise ConfigError(f"unknown keys: {where}")


def format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(pairs: Iterable[tuple[str, object]]) -> str:
    return "".join(f"{key} = {format_value(value)}\n" for key, value in pairs)
