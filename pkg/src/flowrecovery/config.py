"""Plain ``key = value`` configuration files."""

from __future__ import annotations

import os


class ConfigError(ValueError):
    pass


def read_key_values(path: str | os.PathLike) -> dict[str, str]:
    """Parse ``key = value`` lines. Blank lines and ``#`` comments are ignored."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            key = key.strip().replace("-", "_")
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            values[key] = value.strip()
    return values
