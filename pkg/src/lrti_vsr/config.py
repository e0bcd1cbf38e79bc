"""Flat ``key = value`` config files with ``#`` comments and dotted keys."""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Return ``{key: (raw value, line number)}``."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = (value, lineno)
    return out


def read_kv(path: Path) -> dict[str, tuple[str, int]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_kv(path.read_text(), str(path))


def coerce(values: dict[str, tuple[str, int]], schema: dict[str, type], source: str = "<config>") -> dict[str, object]:
    """Convert raw values using ``schema``; unknown keys and bad values name key and line."""
    out = {}
    for key, (raw, lineno) in values.items():
        if key not in schema:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        kind = schema[key]
        try:
            if kind is bool:
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(raw)
                out[key] = raw.lower() in ("true", "1")
            else:
                out[key] = kind(raw)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value {raw!r} for key {key!r}") from None
    return out


def split_sections(values: dict[str, object]) -> dict[str, dict[str, object]]:
    """``{"model.dim": 32}`` -> ``{"model": {"dim": 32}}``."""
    out: dict[str, dict[str, object]] = {}
    for key, value in values.items():
        section, _, name = key.partition(".")
        out.setdefault(section, {})[name] = value
    return out
