"""Flat ``key = value`` text with ``[sections]``, used for run configs and config echoes."""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path


def dumps(sections: dict[str, dict]) -> str:
    lines = []
    for name, values in sections.items():
        lines.append(f"[{name}]")
        for key, value in values.items():
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def loads(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    return {s: dict(parser[s]) for s in parser.sections()}


def load(path) -> dict[str, dict[str, str]]:
    return loads(Path(path).read_text())


def _coerce(raw: str, like):
    if isinstance(like, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if like is None:
        return None if raw.strip() in ("", "None") else int(raw)
    return raw.strip()


def apply(obj, values: dict[str, str]):
    """Return a copy of dataclass ``obj`` with string ``values`` coerced onto its fields."""
    known = {f.name for f in dataclasses.fields(obj)}
    unknown = set(values) - known
    if unknown:
        raise KeyError(f"unknown keys for {type(obj).__name__}: {sorted(unknown)}")
    updates = {k: _coerce(v, getattr(obj, k)) for k, v in values.items()}
    return dataclasses.replace(obj, **updates)
