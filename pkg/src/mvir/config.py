"""Flat ``key = value`` configuration files.

One entry per line; ``#`` starts a comment; blank lines are ignored. Keys
may repeat (``light`` entries of a rig, for instance), so a parsed config
maps every key to the list of its values in file order. Scalar readers
take the last value. The environment is never consulted.
"""

from __future__ import annotations

import re
from pathlib import Path

from .errors import ConfigError

_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")


class Config(dict):
    """``dict[str, list[str]]`` with typed accessors."""

    def raw(self, key: str, default=None):
        vals = self.get(key)
        return vals[-1] if vals else default

    def get_str(self, key: str, default: str | None = None) -> str | None:
        return self.raw(key, default)

    def get_int(self, key: str, default: int | None = None) -> int | None:
        return self._typed(key, int, default)

    def get_float(self, key: str, default: float | None = None) -> float | None:
        return self._typed(key, float, default)

    def get_bool(self, key: str, default: bool | None = None) -> bool | None:
        v = self.raw(key)
        if v is None:
            return default
        low = v.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {v!r}")

    def get_floats(self, key: str, n: int | None = None, default=None) -> tuple[float, ...] | None:
        v = self.raw(key)
        if v is None:
            return default
        try:
            out = tuple(float(x) for x in v.split())
        except ValueError:
            raise ConfigError(f"config key {key!r}: expected numbers, got {v!r}") from None
        if n is not None and len(out) != n:
            raise ConfigError(f"config key {key!r}: expected {n} numbers, got {len(out)}")
        return out

    def get_range(self, key: str, default: tuple[int, int] | None = None) -> tuple[int, int] | None:
        v = self.raw(key)
        return default if v is None else parse_range(v, key)

    def set(self, key: str, value) -> None:
        """Override every earlier value of ``key``."""
        self[key] = [str(value)]

    def _typed(self, key, kind, default):
        v = self.raw(key)
        if v is None:
            return default
        try:
            return kind(v)
        except ValueError:
            raise ConfigError(f"config key {key!r}: expected {kind.__name__}, got {v!r}") from None


def parse_range(text: str, what: str = "range") -> tuple[int, int]:
    """``"a..b"`` or a single ``"a"`` into an inclusive integer range."""
    parts = text.split("..")
    try:
        lo, hi = (int(parts[0]), int(parts[-1])) if len(parts) <= 2 else (None, None)
    except ValueError:
        lo = hi = None
    if lo is None or lo > hi:
        raise ConfigError(f"{what}: expected INT or INT..INT, got {text!r}")
    return lo, hi


def parse_config(text: str, source: str = "<config>") -> Config:
    cfg = Config()
    for num, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{num}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not _KEY.match(key):
            raise ConfigError(f"{source}:{num}: invalid key {key!r}")
        cfg.setdefault(key, []).append(value)
    return cfg


def load_config(path) -> Config:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(), str(p))
