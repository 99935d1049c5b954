"""TOML/JSON configuration loading."""

from __future__ import annotations

import json
import sys
from pathlib import Path

from .errors import InvalidConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


def load_table(path) -> dict:
    """Parse a ``.toml`` or ``.json`` file into a dict."""
    p = Path(path)
    try:
        if p.suffix.lower() == ".json":
            data = json.loads(p.read_text(encoding="utf-8"))
        else:
            data = tomllib.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise InvalidConfig(f"config file not found: {p}") from None
    except (ValueError, tomllib.TOMLDecodeError) as e:
        raise InvalidConfig(f"{p}: {e}") from None
    if not isinstance(data, dict):
        raise InvalidConfig(f"{p}: top level must be a table")
    return data
