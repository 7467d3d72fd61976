"""Experiment configuration: one TOML file with [world], [codec], [schedule] and [experiment] sections.

Every value has a default, so an empty file is a valid configuration. Any
problem is reported as a ``ConfigError`` whose message starts with the
dotted key at fault (``experiment.sweep_cfg.grid: ...``).
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from weakguide.diffusion import ANCESTRAL, DETERMINISTIC, DiffusionSchedule
from weakguide.world import World, WorldError, build_world, load_world_spec, world_spec_from_dict

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

DATA = Path(__file__).with_name("data")
BUILTIN_WORLDS = {"default": DATA / "default_world.toml", "multi_axis": DATA / "multi_axis_world.toml"}

PROFESSIONS = ["ceo", "doctor", "pilot", "technician", "fashion_designer", "librarian", "teacher", "nurse"]

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "world": {"file": "builtin:default"},
    "codec": {"length": 16, "dim": 32, "post_eos_weight": 0.1, "context_mixing": 1.0, "seed": 0},
    "schedule": {"n_steps": 1000, "beta_start": 1e-4, "beta_end": 0.02, "mode": ANCESTRAL},
    "experiment": {
        "n": 2000,
        "block": 1000,
        "mode_test": {"contexts": ["ceo", "nurse"], "depths": [0.0, 0.6, 1.0]},
        "sweep_cfg": {"contexts": ["teacher"], "grid": [1.0, 2.0, 4.0, 6.0, 8.0]},
        "sweep_cads": {
            "contexts": ["teacher"],
            "alpha": 1.0,
            "tau2": 0.9,
            "grid": [[0.0, 0.6], [0.1, 0.6], [0.25, 0.6], [0.5, 0.6], [0.25, 0.4]],
        },
        "sweep_swap": {"contexts": ["teacher"], "grid": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]},
        "debias": {
            "contexts": PROFESSIONS,
            "objects": ["car", "tree", "house"],
            "methods": ["vanilla", "weak", "every_position", "prompt_append"],
            "tau": 0.9,
            "multi_axis_world": "builtin:multi_axis",
            "multi_axis_contexts": ["ceo", "doctor", "nurse", "teacher"],
        },
        "compliance": {
            "contexts": ["ceo", "doctor", "teacher", "nurse"],
            "methods": ["vanilla", "weak", "every_position"],
            "tau": 0.9,
        },
    },
}

KINDS = ("mode_test", "sweep_cfg", "sweep_cads", "sweep_swap", "debias", "compliance")


class ConfigError(ValueError):
    """Malformed configuration; the message names the offending key."""


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict  # fully resolved settings (defaults merged, overrides applied)
    world: World
    schedule: DiffusionSchedule
    base_dir: Path

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def n(self) -> int:
        return int(self.raw["experiment"]["n"])

    @property
    def block(self) -> int:
        return int(self.raw["experiment"]["block"])

    @property
    def mode(self) -> str:
        return self.raw["schedule"]["mode"]

    def params(self, kind: str) -> dict:
        return self.raw["experiment"][kind]

    def load_world(self, ref: str) -> World:
        """A second world (e.g. the multi-axis one) built with this config's codec settings."""
        return _world_from_ref(ref, self.raw["codec"], self.base_dir, f"world reference {ref!r}")

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(
        self, seed: int | None = None, n: int | None = None, grid: tuple[str, str, list] | None = None
    ) -> "ExperimentConfig":
        """A copy with the master seed, chains per cell, or one experiment list replaced.

        ``grid`` is ``(experiment kind, key, values)``, e.g. ``("sweep_cfg", "grid", [1, 2])``.
        """
        raw = copy.deepcopy(self.raw)
        if seed is not None:
            raw["seed"] = seed
        if n is not None:
            raw["experiment"]["n"] = n
        if grid is not None:
            kind, key, values = grid
            raw["experiment"][kind][key] = values
        return config_from_dict(raw, self.base_dir)


def _merge(base: dict, over: Mapping, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"{path}: unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"{path}: expected a table")
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _world_from_ref(ref: str, codec_cfg: Mapping, base_dir: Path, where: str) -> World:
    if ref.startswith("builtin:"):
        name = ref.split(":", 1)[1]
        if name not in BUILTIN_WORLDS:
            raise ConfigError(f"{where}: unknown builtin world {name!r} (have {sorted(BUILTIN_WORLDS)})")
        path = BUILTIN_WORLDS[name]
    else:
        path = (base_dir / ref).resolve()
        if not path.is_file():
            raise ConfigError(f"{where}: world file {str(path)!r} not found")
    try:
        return build_world(load_world_spec(path), codec_cfg)
    except (WorldError, KeyError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"codec: {exc}") from None


def _check_number(value, path: str, *, low=None, integer=False, positive=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or (integer and not isinstance(value, int)):
        raise ConfigError(f"{path}: expected {'an integer' if integer else 'a number'}, got {value!r}")
    if positive and value <= 0:
        raise ConfigError(f"{path}: must be > 0")
    if low is not None and value < low:
        raise ConfigError(f"{path}: must be >= {low}")


def _check_list(value, path: str) -> list:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{path}: expected a nonempty list")
    return value


def _validate(raw: dict, world: World) -> None:
    _check_number(raw["seed"], "seed", integer=True, low=0)
    sched = raw["schedule"]
    _check_number(sched["n_steps"], "schedule.n_steps", integer=True, positive=True)
    if sched["mode"] not in (ANCESTRAL, DETERMINISTIC):
        raise ConfigError(f"schedule.mode: expected 'ancestral' or 'deterministic', got {sched['mode']!r}")
    exp = raw["experiment"]
    _check_number(exp["n"], "experiment.n", integer=True, positive=True)
    _check_number(exp["block"], "experiment.block", integer=True, positive=True)
    attr_ctx = set(world.attribute_contexts)
    for kind in KINDS:
        p = exp[kind]
        where = f"experiment.{kind}"
        for i, ctx in enumerate(_check_list(p["contexts"], f"{where}.contexts")):
            if ctx not in attr_ctx:
                raise ConfigError(f"{where}.contexts[{i}]: {ctx!r} is not a context with attributes")
        if "grid" in p:
            _check_list(p["grid"], f"{where}.grid")
    for i, d in enumerate(_check_list(exp["mode_test"]["depths"], "experiment.mode_test.depths")):
        _check_number(d, f"experiment.mode_test.depths[{i}]")
        if not 0.0 <= d <= 1.0:
            raise ConfigError(f"experiment.mode_test.depths[{i}]: must lie in [0, 1]")
    for i, a in enumerate(exp["sweep_cfg"]["grid"]):
        _check_number(a, f"experiment.sweep_cfg.grid[{i}]", low=0)
    cads = exp["sweep_cads"]
    _check_number(cads["alpha"], "experiment.sweep_cads.alpha", low=0)
    for i, cell in enumerate(cads["grid"]):
        path = f"experiment.sweep_cads.grid[{i}]"
        if not isinstance(cell, list) or len(cell) != 2:
            raise ConfigError(f"{path}: expected [s, tau1]")
        _check_number(cell[0], path, low=0)
        _check_number(cell[1], path, low=0)
        if not cell[1] < cads["tau2"] <= 1.0:
            raise ConfigError(f"{path}: need tau1 < tau2 <= 1")
    for i, f in enumerate(exp["sweep_swap"]["grid"]):
        _check_number(f, f"experiment.sweep_swap.grid[{i}]", low=0)
        if f > 1:
            raise ConfigError(f"experiment.sweep_swap.grid[{i}]: must lie in [0, 1]")
    valid = {"vanilla", "weak", "every_position", "prompt_append"}
    for kind in ("debias", "compliance"):
        for i, m in enumerate(_check_list(exp[kind]["methods"], f"experiment.{kind}.methods")):
            if m not in valid:
                raise ConfigError(f"experiment.{kind}.methods[{i}]: unknown method {m!r}")
        _check_number(exp[kind]["tau"], f"experiment.{kind}.tau", low=0)
    for i, ctx in enumerate(exp["debias"]["objects"]):
        if ctx not in world.object_contexts:
            raise ConfigError(f"experiment.debias.objects[{i}]: {ctx!r} is not an object context")


def config_from_dict(data: Mapping, base_dir: Path | str = ".") -> ExperimentConfig:
    base_dir = Path(base_dir)
    world_over = data.get("world", {})
    if not isinstance(world_over, Mapping):
        raise ConfigError("world: expected a table")
    rest = {k: v for k, v in data.items() if k != "world"}
    raw = _merge({k: v for k, v in DEFAULTS.items() if k != "world"}, rest, "")
    raw["world"] = dict(world_over) or copy.deepcopy(DEFAULTS["world"])
    codec_cfg = raw["codec"]
    if "file" in raw["world"]:
        if len(raw["world"]) != 1:
            raise ConfigError("world: give either 'file' or an inline world, not both")
        world = _world_from_ref(str(raw["world"]["file"]), codec_cfg, base_dir, "world.file")
    else:
        try:
            world = build_world(world_spec_from_dict(raw["world"]), codec_cfg)
        except (WorldError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"codec: {exc}") from None
    sched = raw["schedule"]
    try:
        schedule = DiffusionSchedule.linear(int(sched["n_steps"]), float(sched["beta_start"]), float(sched["beta_end"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"schedule: {exc}") from None
    _validate(raw, world)
    return ExperimentConfig(raw, world, schedule, base_dir)


def load_config(path: str | Path | None = None) -> ExperimentConfig:
    """Load a TOML config; ``None`` gives the built-in defaults."""
    if path is None:
        return config_from_dict({}, Path("."))
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config: file {str(path)!r} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: invalid TOML ({exc})") from None
    return config_from_dict(data, path.parent)
