"""Flat ``key = value`` run configuration and manifests.

Files carry no section headers; one is injected so :mod:`configparser`
can do the parsing. Values are decoded as int, float, bool or string.
"""

from __future__ import annotations

import configparser
from pathlib import Path

_SECTION = "run"


def _decode(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    for cast in (int, float):
        try:
            return cast(t)
        except ValueError:
            pass
    return t


def _encode(value) -> str:
    if isinstance(value, float):
        return repr(value)  # round-trips exactly
    if isinstance(value, (list, tuple)):
        return ",".join(_encode(v) for v in value)
    return str(value)


def parse_config(text: str) -> dict:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case
    cp.read_string(f"[{_SECTION}]\n" + text)
    return {k.replace("-", "_"): _decode(v) for k, v in cp[_SECTION].items()}


def read_config(path) -> dict:
    return parse_config(Path(path).read_text())


def format_manifest(params: dict) -> str:
    lines = [f"{k} = {_encode(v)}" for k, v in sorted(params.items()) if v is not None]
    return "\n".join(lines) + "\n"


def write_manifest(path, params: dict) -> None:
    Path(path).write_text(format_manifest(params))


def merge(defaults: dict, file_values: dict, flags: dict) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags.

    ``flags`` holds only options given on the command line (``None`` means
    not given).
    """
    out = dict(defaults)
    unknown = set(file_values) - set(defaults)
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out.update(file_values)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out
