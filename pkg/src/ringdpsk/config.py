"""Plain-text configuration files.

Grammar, one assignment per line::

    # comment
    sample_rate = 64M
    osc.i_ch = 134.4u          # amperes
    osc.c_dis = 8.75 fF
    impairments.awgn_snr_db = inf
    scenario.mode = 16DPSK

``section`` is one of ``osc``, ``control``, ``modem``, ``impairments``,
``receiver`` or ``scenario``; ``sample_rate`` and ``rng_seed`` have no
section. Numbers take an optional SI prefix ``G M k m u n p f`` followed by
an optional unit (``Hz s F A V``); the value is formed as an exact rational
and rounded once, so ``134.4u`` is bit-identical to ``134.4e-6``. ``none``
clears an optional field, ``inf`` is infinity. ``scenario.*`` keys are not
part of :class:`SimConfig` and are returned as strings for the caller.
"""
from __future__ import annotations

import math
import re
import typing
from dataclasses import dataclass, fields, replace
from fractions import Fraction

from .core import (
    ConfigError,
    ControlConfig,
    ImpairmentConfig,
    ModemTiming,
    OscConfig,
    ReceiverConfig,
    SimConfig,
)

SI_PREFIX = {"G": 9, "M": 6, "k": 3, "m": -3, "u": -6, "n": -9, "p": -12, "f": -15}
UNITS = ("Hz", "s", "F", "A", "V")
SECTIONS = {
    "osc": OscConfig,
    "control": ControlConfig,
    "modem": ModemTiming,
    "impairments": ImpairmentConfig,
    "receiver": ReceiverConfig,
}
TOP_LEVEL = ("sample_rate", "rng_seed")

_NUMBER = re.compile(r"^([+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)\s*([GMkmunpf]?)\s*(Hz|s|F|A|V)?$")


@dataclass(frozen=True)
class ConfigDocument:
    sim: SimConfig
    scenario: dict[str, str]


def parse_number(text: str, key: str = "value") -> Fraction:
    """Exact rational value of ``text`` (SI prefix and unit allowed)."""
    m = _NUMBER.match(text.strip())
    if not m:
        raise ConfigError(f"{key}: cannot parse {text!r} as a number")
    value = Fraction(m.group(1))
    if m.group(2):
        value *= Fraction(10) ** SI_PREFIX[m.group(2)]
    return value


def _convert(text: str, kind, key: str):
    raw = text.strip()
    low = raw.lower()
    args = typing.get_args(kind)
    optional = type(None) in args
    if args:
        kind = next(a for a in args if a is not type(None))
    if low == "none":
        if optional:
            return None
        raise ConfigError(f"{key}: 'none' is not allowed here")
    if kind is str:
        return raw
    if kind is bool:
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key}: expected true/false, got {raw!r}")
    if kind is float and low in ("inf", "+inf", "-inf"):
        return -math.inf if low.startswith("-") else math.inf
    value = parse_number(raw, key)
    if kind is int:
        if value.denominator != 1:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
        return int(value)
    return float(value)


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def parse_config(text: str, base: SimConfig | None = None) -> ConfigDocument:
    """Parse config text on top of ``base`` (default: the nominal profile)."""
    sim = base or SimConfig()
    updates: dict[str, dict] = {name: {} for name in SECTIONS}
    top: dict = {}
    scenario: dict[str, str] = {}
    top_hints = _hints(SimConfig)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        key, _, value = (p.strip() for p in line.partition("="))
        if not value:
            raise ConfigError(f"{key}: missing value (line {lineno})")
        section, dot, name = key.partition(".")
        if not dot:
            if key not in TOP_LEVEL:
                raise ConfigError(f"unknown key {key!r} (line {lineno})")
            top[key] = _convert(value, top_hints[key], key)
        elif section == "scenario":
            scenario[name] = value
        elif section in SECTIONS:
            hints = _hints(SECTIONS[section])
            if name not in hints:
                raise ConfigError(f"unknown key {key!r} (line {lineno})")
            updates[section][name] = _convert(value, hints[name], key)
        else:
            raise ConfigError(f"unknown section {section!r} in key {key!r} (line {lineno})")
    parts = {name: replace(getattr(sim, name), **vals) for name, vals in updates.items()}
    return ConfigDocument(replace(sim, **parts, **top), scenario)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def serialize_config(sim: SimConfig, scenario: dict[str, str] | None = None) -> str:
    """Text form of ``sim``; :func:`parse_config` reads it back unchanged."""
    lines = [f"{k} = {_format(getattr(sim, k))}" for k in TOP_LEVEL]
    for section in SECTIONS:
        obj = getattr(sim, section)
        lines.append("")
        lines.extend(f"{section}.{f.name} = {_format(getattr(obj, f.name))}" for f in fields(obj))
    if scenario:
        lines.append("")
        lines.extend(f"scenario.{k} = {v}" for k, v in scenario.items())
    return "\n".join(lines) + "\n"


def load_config(path) -> ConfigDocument:
    with open(path) as fh:
        return parse_config(fh.read())
