"""Config file parsing: INI-style sections mirroring the env, policy, and
trainer dataclasses, with line-level diagnostics on bad keys or values."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import fields

from .gridworld import MapParams
from .policy import PolicyConfig
from .runner import WorldConfig
from .trainer import TrainConfig


class ConfigError(Exception):
    pass


_SECTIONS = {
    "map": MapParams,
    "world": WorldConfig,
    "policy": PolicyConfig,
    "train": TrainConfig,
}


def _coerce(raw, target_type, where):
    try:
        if target_type is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e


def load_config(path):
    """Parse a config file into (WorldConfig, PolicyConfig, TrainConfig).

    Unknown sections or keys are errors that name the offending line."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    read = parser.read(path)
    if not read:
        raise ConfigError(f"{path}: cannot read config file")

    values = {name: {} for name in _SECTIONS}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]"
                              f" (expected one of {sorted(_SECTIONS)})")
        cls = _SECTIONS[section]
        known = {f.name: f.type for f in fields(cls)}
        types = {f.name: f for f in fields(cls)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"{path}: [{section}] has no key {key!r}"
                                  f" (known: {sorted(known)})")
            f = types[key]
            base = type(getattr(_default(cls), key))
            values[section][key] = _coerce(raw, base, f"{path}: [{section}] {key}")

    map_params = dataclasses.replace(_default(MapParams), **values["map"])
    world_kw = dict(values["world"])
    world_kw["map_params"] = map_params
    world = dataclasses.replace(_default(WorldConfig), **world_kw)
    policy = dataclasses.replace(_default(PolicyConfig), **values["policy"])
    train = dataclasses.replace(_default(TrainConfig), **values["train"])
    # Dimensions that must agree across sections come from the world/map.
    policy = dataclasses.replace(policy, view_size=world.view_size,
                                 category_count=map_params.category_count)
    try:
        policy.validate()
        train.validate()
        map_params.validate()
    except ValueError as e:
        raise ConfigError(f"{path}: {e}") from e
    return world, policy, train


_DEFAULTS = {}


def _default(cls):
    inst = _DEFAULTS.get(cls)
    if inst is None:
        inst = cls()
        _DEFAULTS[cls] = inst
    return inst


def dump_config(world: WorldConfig, policy: PolicyConfig, train: TrainConfig) -> str:
    """Render configs back to INI text (used for run manifests)."""
    lines = []
    mp = world.map_params
    lines.append("[map]")
    for f in fields(MapParams):
        lines.append(f"{f.name} = {getattr(mp, f.name)}")
    lines.append("")
    lines.append("[world]")
    for f in fields(WorldConfig):
        if f.name == "map_params":
            continue
        lines.append(f"{f.name} = {getattr(world, f.name)}")
    lines.append("")
    lines.append("[policy]")
    for f in fields(PolicyConfig):
        lines.append(f"{f.name} = {getattr(policy, f.name)}")
    lines.append("")
    lines.append("[train]")
    for f in fields(TrainConfig):
        lines.append(f"{f.name} = {getattr(train, f.name)}")
    return "\n".join(lines) + "\n"
