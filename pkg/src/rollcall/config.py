"""Key-value config files.

Format: one `key = value` per line, `#` starts a comment, blank lines
ignored.  Keys are dotted lowercase identifiers (`edge.node_id`).
Environment variables override file values: `ROLLCALL_EDGE__NODE_ID`
overrides `edge.node_id` (prefix `ROLLCALL_`, dots become `__`, upper case).
"""

from __future__ import annotations

import os
import re
from datetime import date, time

from .errors import ConfigError

_KEY_RE = re.compile(r"^[a-z0-9_]+(\.[a-z0-9_]+)*$")

ENV_PREFIX = "ROLLCALL_"

_WEEKDAYS = {"mon": 0, "tue": 1, "wed": 2, "thu": 3, "fri": 4, "sat": 5, "sun": 6}


def parse_config(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if not _KEY_RE.match(key):
                raise ConfigError(f"{path}:{lineno}: bad key {key!r}")
            values[key] = value.strip()
    return values


def env_name(key: str) -> str:
    return ENV_PREFIX + key.replace(".", "__").upper()


def apply_env_overrides(values: dict[str, str], environ=os.environ) -> dict[str, str]:
    out = dict(values)
    for key in list(out) + [k for k in _env_keys(environ) if k not in out]:
        name = env_name(key)
        if name in environ:
            out[key] = environ[name]
    return out


def _env_keys(environ) -> list[str]:
    keys = []
    for name in environ:
        if name.startswith(ENV_PREFIX):
            keys.append(name[len(ENV_PREFIX):].lower().replace("__", "."))
    return keys


def load_config(path: str, environ=os.environ) -> dict[str, str]:
    return apply_env_overrides(parse_config(path), environ)


# -- typed getters ------------------------------------------------------------

def get_str(cfg: dict[str, str], key: str, default: str | None = None) -> str:
    if key in cfg:
        return cfg[key]
    if default is None:
        raise ConfigError(f"missing required config key {key!r}")
    return default

def get_int(cfg: dict[str, str], key: str, default: int | None = None) -> int:
    if key not in cfg:
        if default is None:
            raise ConfigError(f"missing required config key {key!r}")
        return default
    try:
        return int(cfg[key])
    except ValueError:
        raise ConfigError(f"config key {key!r}: {cfg[key]!r} is not an integer") from None


def get_float(cfg: dict[str, str], key: str, default: float) -> float:
    if key not in cfg:
        return default
    try:
        return float(cfg[key])
    except ValueError:
        raise ConfigError(f"config key {key!r}: {cfg[key]!r} is not a number") from None


def get_time(cfg: dict[str, str], key: str, default: time) -> time:
    if key not in cfg:
        return default
    try:
        return time.fromisoformat(cfg[key])
    except ValueError:
        raise ConfigError(f"config key {key!r}: {cfg[key]!r} is not HH:MM:SS") from None


def get_dates(cfg: dict[str, str], key: str) -> frozenset[date]:
    raw = cfg.get(key, "").strip()
    if not raw:
        return frozenset()
    try:
        return frozenset(date.fromisoformat(part.strip()) for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"config key {key!r}: expected comma-separated YYYY-MM-DD dates") from None


def get_weekdays(cfg: dict[str, str], key: str, default: frozenset[int]) -> frozenset[int]:
    raw = cfg.get(key, "").strip().lower()
    if not raw:
        return default
    days = set()
    for part in raw.split(","):
        part = part.strip()
        if part not in _WEEKDAYS:
            raise ConfigError(f"config key {key!r}: unknown weekday {part!r}")
        days.add(_WEEKDAYS[part])
    return frozenset(days)


def get_hostport(cfg: dict[str, str], key: str, default: str | None = None) -> tuple[str, int]:
    raw = get_str(cfg, key, default)
    host, _, port = raw.rpartition(":")
    if not host or not port:
        raise ConfigError(f"config key {key!r}: expected host:port, got {raw!r}")
    try:
        return host, int(port)
    except ValueError:
        raise ConfigError(f"config key {key!r}: bad port in {raw!r}") from None
