"""INI configuration for the command line.

One section per subcommand, keys named like the long flags
(``lm-scale`` or ``lm_scale``). Values in ``[DEFAULT]`` apply to every
section. Flags given on the command line win over the file.

Relative paths are resolved against ``$LATRESCORE_DATA_DIR`` when it is set.
"""

from __future__ import annotations

import argparse
import configparser
import os
from pathlib import Path

DATA_DIR_ENV = "LATRESCORE_DATA_DIR"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def data_dir() -> Path | None:
    d = os.environ.get(DATA_DIR_ENV)
    return Path(d) if d else None


def resolve(path) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    base = data_dir()
    if base is not None and not p.is_absolute():
        return base / p
    return p


def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        cp.read_file(fh)
    return cp


def _parse_bool(text: str, key: str) -> bool:
    t = text.strip().lower()
    if t in _TRUE:
        return True
    if t in _FALSE:
        return False
    raise ValueError(f"config key {key!r}: expected a boolean, got {text!r}")


def apply_config(parser: argparse.ArgumentParser, cp: configparser.ConfigParser,
                 section: str) -> None:
    """Turn the keys of ``section`` into defaults of ``parser``.

    Unknown keys are an error so that typos do not pass silently.
    """
    if not cp.has_section(section) and not cp.defaults():
        return
    items = cp.items(section) if cp.has_section(section) else cp.defaults().items()
    by_dest = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in items:
        dest = key.replace("-", "_")
        action = by_dest.get(dest)
        if action is None:
            if key in cp.defaults():
                continue
            raise ValueError(f"[{section}] unknown key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[dest] = _parse_bool(raw, key)
        elif action.nargs in ("+", "*"):
            conv = action.type or str
            defaults[dest] = [conv(v) for v in raw.split()]
        else:
            conv = action.type or str
            value = conv(raw)
            if action.choices is not None and value not in action.choices:
                raise ValueError(f"[{section}] {key}: {value!r} not in {sorted(action.choices)}")
            defaults[dest] = value
    parser.set_defaults(**defaults)
