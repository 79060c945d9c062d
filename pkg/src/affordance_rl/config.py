"""TOML run configuration.

One file configures the whole pipeline. Tables and their keys::

    seed = 0                 # root seed; every stage derives its streams from it
    [arm]        ArmConfig fields
    [physics]    WidgetPhysics fields
    [episode]    EpisodeConfig fields (widget_kind and rng_seed are set per stage)
    [ppo]        PpoConfig fields (seed and min_log_std are set per stage)
    [phase1]     Phase1Settings
    [dataset]    DatasetSettings
    [classifier] ClassifierSettings
    [phase2]     Phase2Settings

Every key is optional. Unknown tables or keys, wrongly typed values and
values rejected by the dataclass validators raise :class:`ConfigError`
naming the file and line.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .env import EpisodeConfig
from .ppo import PpoConfig
from .sim import ArmConfig, WidgetPhysics


class ConfigError(ValueError):
    pass


@dataclass
class Phase1Settings:
    updates: int = 80
    kinds: tuple = ("button", "slider")
    eval_episodes: int = 200
    eval_every: int = 5


@dataclass
class DatasetSettings:
    n_per_class: int = 500
    batch: int = 200
    # give up on a class after this many rollouts
    max_attempts: int = 20_000


@dataclass
class ClassifierSettings:
    hidden: int = 32
    epochs: int = 300
    learning_rate: float = 3e-3
    batch_size: int = 64
    patience: int = 40
    weight_decay: float = 1e-4


@dataclass
class Phase2Settings:
    updates: int = 60
    min_std: float = 0.3
    eval_episodes: int = 100
    probe_every: int = 1
    probe_rollouts: int = 50


# fields fixed by the harness per stage rather than by the file
_MANAGED = {"episode": {"widget_kind", "rng_seed"}, "ppo": {"seed", "min_log_std"}}


@dataclass
class RunConfig:
    seed: int = 0
    arm: ArmConfig = field(default_factory=ArmConfig)
    physics: WidgetPhysics = field(default_factory=WidgetPhysics)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    phase1: Phase1Settings = field(default_factory=Phase1Settings)
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    classifier: ClassifierSettings = field(default_factory=ClassifierSettings)
    phase2: Phase2Settings = field(default_factory=Phase2Settings)

    def to_dict(self) -> dict:
        out = {"seed": self.seed}
        for name in _SECTIONS:
            section = getattr(self, name)
            skip = _MANAGED.get(name, ())
            out[name] = {f.name: _plain(getattr(section, f.name))
                         for f in dataclasses.fields(section) if f.name not in skip}
        return out

    def to_toml(self) -> str:
        d = self.to_dict()
        lines = [f"seed = {_toml_value(d['seed'])}"]
        for name in _SECTIONS:
            lines.append(f"\n[{name}]")
            lines.extend(f"{k} = {_toml_value(v)}" for k, v in d[name].items())
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = ("arm", "physics", "episode", "ppo", "phase1", "dataset", "classifier", "phase2")


def _plain(v):
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if hasattr(v, "value"):  # enums
        return v.value
    return v


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise TypeError(f"cannot write {type(v).__name__} to TOML")


def _key_line(text: str, section: str | None, key: str | None) -> int | None:
    """1-based line of ``key`` inside ``[section]`` (or of the header itself)."""
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        header = re.match(r"\s*\[([^\[\]]+)\]", line)
        if header:
            current = header.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if key is not None and current == section and re.match(rf"\s*{re.escape(key)}\s*=", line):
            return i
    return None


def _check_type(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, tuple):
        return isinstance(value, list)
    if isinstance(default, str) or hasattr(default, "value"):
        return isinstance(value, str)
    return True


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def from_dict(data: dict, text: str = "", source: str = "<config>") -> RunConfig:
    def fail(msg, section=None, key=None):
        line = _key_line(text, section, key) if text else None
        if line is None and section is not None:
            line = _key_line(text, section, None) if text else None
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: {msg}")

    cfg = RunConfig()
    for top, value in data.items():
        if top == "seed":
            if not _check_type(0, value):
                fail(f"'seed' must be an integer, got {value!r}", None, "seed")
            cfg.seed = value
        elif top not in _SECTIONS:
            fail(f"unknown table or key '{top}' (known: seed, {', '.join(_SECTIONS)})", top, None if isinstance(value, dict) else top)
        elif not isinstance(value, dict):
            fail(f"'{top}' must be a table", None, top)
    for name in _SECTIONS:
        table = data.get(name)
        if table is None:
            continue
        default = getattr(cfg, name)
        fields = {f.name: f for f in dataclasses.fields(default)}
        allowed = set(fields) - _MANAGED.get(name, set())
        kwargs = {}
        for key, value in table.items():
            if key not in allowed:
                fail(f"unknown key '{key}' in [{name}] (allowed: {', '.join(sorted(allowed))})", name, key)
            if not _check_type(getattr(default, key), value):
                fail(f"[{name}] {key}: expected {type(getattr(default, key)).__name__}, got {value!r}", name, key)
            kwargs[key] = _tuplify(value)
        try:
            setattr(cfg, name, dataclasses.replace(default, **kwargs))
        except (ValueError, TypeError) as err:
            fail(f"[{name}] {err}", name, None)
    return cfg


def load_config(path=None, overrides: dict = None) -> RunConfig:
    """Read ``path`` (or defaults when None), then apply dotted ``overrides``."""
    text, source, data = "", "<defaults>", {}
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"{source}: cannot read config ({err.strerror})") from err
        try:
            data = tomli.loads(text)
        except tomli.TOMLDecodeError as err:
            m = re.search(r"line (\d+)", str(err))
            raise ConfigError(f"{source}:{m.group(1) if m else '?'}: {err}") from err
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted}: '{p}' is not a table")
        node[leaf] = value
    return from_dict(data, text, source)


def parse_override(item: str) -> tuple[str, object]:
    """``section.key=value`` with a TOML literal value (bare words become strings)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = (s.strip() for s in item.split("=", 1))
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    return key, value
