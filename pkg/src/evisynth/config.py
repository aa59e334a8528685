"""Declarative ``key = value`` configuration files.

The format, used for strata/model/sampler/simulation settings alike:
one ``key = value`` pair per line, ``#`` starts a comment, blank lines
ignored. List values are comma-separated; integer ranges may be written
``first-last`` (inclusive). Keys are case-sensitive and may not repeat.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def parse_kv_text(text: str, origin: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{origin}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_kv_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_kv_text(text, origin=str(path))


def get_list(kv: dict[str, str], key: str, default: list[str] | None = None) -> list[str]:
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing config key {key!r}")
        return list(default)
    items = [item.strip() for item in kv[key].split(",") if item.strip()]
    if not items:
        raise ConfigError(f"config key {key!r} has an empty list value")
    return items


def get_int_list(kv: dict[str, str], key: str, default: list[int] | None = None) -> list[int]:
    """Integer list; a single 'a-b' token expands to the inclusive range."""
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing config key {key!r}")
        return list(default)
    value = kv[key].strip()
    if not value:
        raise ConfigError(f"config key {key!r} has an empty value")
    if "," not in value and "-" in value and not value.startswith("-"):
        first, last = value.split("-", 1)
        try:
            lo, hi = int(first), int(last)
        except ValueError as exc:
            raise ConfigError(f"config key {key!r}: bad range {value!r}") from exc
        if hi < lo:
            raise ConfigError(f"config key {key!r}: descending range {value!r}")
        return list(range(lo, hi + 1))
    try:
        return [int(tok) for tok in value.split(",")]
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: expected integers, got {value!r}") from exc


def get_float(kv: dict[str, str], key: str, default: float | None = None) -> float:
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing config key {key!r}")
        return default
    try:
        return float(kv[key])
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: expected a number, got {kv[key]!r}") from exc


def get_int(kv: dict[str, str], key: str, default: int | None = None) -> int:
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing config key {key!r}")
        return default
    try:
        return int(kv[key])
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: expected an integer, got {kv[key]!r}") from exc


def get_str(kv: dict[str, str], key: str, default: str | None = None) -> str:
    if key not in kv:
        if default is None:
            raise ConfigError(f"missing config key {key!r}")
        return default
    return kv[key]
