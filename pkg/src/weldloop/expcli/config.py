"""Experiment configuration and its ``key=value`` file format.

Keys are namespaced: ``sim.*`` maps onto :class:`~weldloop.weldsim.SimParams`,
``sac.*`` onto :class:`~weldloop.twin.sac.SACConfig`, and the remaining
top-level keys onto :class:`ExperimentConfig` itself.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from weldloop import weldsim
from weldloop.twin.sac import SACConfig

ALIASES = {"sim.lambda": "sim.lam"}


@dataclass
class ExperimentConfig:
    surface: str = "sandblasted"
    episodes: int = 300
    seed: int = 0
    realtime: bool = False
    random_episodes: int = 25
    test_every: int = 10
    baseline_episodes: int = 20
    baseline_powers: tuple[float, ...] = weldsim.BASELINE_POWERS
    timeout: float = 30.0
    sim: weldsim.SimParams = field(default_factory=weldsim.SimParams)
    sac: SACConfig = field(default_factory=SACConfig)


def _coerce(current, text: str):
    text = text.strip()
    if isinstance(current, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, tuple):
        items = [s for s in (p.strip() for p in text.split(",")) if s]
        kind = type(current[0]) if current else float
        return tuple(kind(s) for s in items)
    return text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def apply_overrides(conf: ExperimentConfig, items: dict[str, str]) -> ExperimentConfig:
    sim_updates, sac_updates, top_updates = {}, {}, {}
    for raw_key, value in items.items():
        key = ALIASES.get(raw_key, raw_key)
        section, _, name = key.rpartition(".")
        if section == "sim":
            target, updates = conf.sim, sim_updates
        elif section == "sac":
            target, updates = conf.sac, sac_updates
        elif section == "":
            target, updates = conf, top_updates
        else:
            raise ValueError(f"unknown config section in {raw_key!r}")
        if name in ("sim", "sac") or not any(f.name == name for f in dataclasses.fields(target)):
            raise ValueError(f"unknown config key {raw_key!r}")
        updates[name] = _coerce(getattr(target, name), value)
    sim = dataclasses.replace(conf.sim, **sim_updates)
    sac = dataclasses.replace(conf.sac, **sac_updates)
    return dataclasses.replace(conf, sim=sim, sac=sac, **top_updates)


def parse_lines(text: str, origin: str = "<config>") -> dict[str, str]:
    items = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{origin}:{lineno}: expected key=value")
        items[key.strip()] = value.strip()
    return items


def load_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    return apply_overrides(base or ExperimentConfig(), parse_lines(Path(path).read_text(), str(path)))


def dump_config(conf: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(conf):
        if f.name in ("sim", "sac"):
            continue
        lines.append(f"{f.name}={_format(getattr(conf, f.name))}")
    for section in ("sim", "sac"):
        obj = getattr(conf, section)
        for f in dataclasses.fields(obj):
            lines.append(f"{section}.{f.name}={_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def resolve_profile(surface: str) -> weldsim.SurfaceProfile:
    """Preset name, or a path to a profile file."""
    if surface in weldsim.PRESETS:
        return weldsim.PRESETS[surface]
    if Path(surface).is_file():
        return weldsim.load_profile(surface)
    return weldsim.get_profile(surface)
