"""Versioned run configuration: strict TOML with hard unknown-key errors."""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossWeights
from .nets import NetConfig
from .priority_graph import FieldParams
from .sim.engine import RewardWeights
from .sim.scenario import Scenario, builtin_scenario, load_scenario
from .training import TrainConfig
from .weaving import WeaveParams

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter version
    import tomli as tomllib

CONFIG_VERSION = 1

SCENARIO_OVERRIDE_KEYS = (
    "n_vehicles",
    "episode_len",
    "dt",
    "v_max",
    "a_max",
    "steer_max",
    "spawn_speed_frac",
    "spawn_jitter",
)


class ConfigError(ValueError):
    """Configuration problem; message names the offending key."""


@dataclass
class ScenarioChoice:
    name: str = "merge"
    path: str | None = None
    overrides: dict = field(default_factory=dict)

    def build(self) -> Scenario:
        if self.path is not None:
            return load_scenario(self.path, **self.overrides)
        return builtin_scenario(self.name, **self.overrides)


@dataclass
class RunSettings:
    seed: int = 0
    single_thread: bool = True
    out_dir: str | None = None
    scenario: ScenarioChoice = field(default_factory=ScenarioChoice)
    weave: WeaveParams = field(default_factory=WeaveParams)
    field_params: FieldParams = field(default_factory=FieldParams)
    net: NetConfig = field(default_factory=NetConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    reward: RewardWeights = field(default_factory=RewardWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        self.train.seed = self.seed

    def build_scenario(self) -> Scenario:
        return self.scenario.build()


_SECTION_TYPES = {
    "weave": WeaveParams,
    "field": FieldParams,
    "net": NetConfig,
    "loss": LossWeights,
    "reward": RewardWeights,
    "train": TrainConfig,
}
_RUN_KEYS = ("seed", "single_thread", "out_dir")


def _build_section(section: str, data: dict, cls):
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key [{section}].{key}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from None


def parse_run_config(data: dict, source: str = "<config>") -> RunSettings:
    data = dict(data)
    version = data.pop("version", None)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{source}: config version must be {CONFIG_VERSION}, got {version!r}")
    settings = RunSettings()

    run = data.pop("run", {})
    for key in run:
        if key not in _RUN_KEYS:
            raise ConfigError(f"unknown key [run].{key}")
    settings.seed = int(run.get("seed", settings.seed))
    settings.single_thread = bool(run.get("single_thread", True))
    settings.out_dir = run.get("out_dir", None)

    scen = data.pop("scenario", {})
    choice = ScenarioChoice()
    for key, value in scen.items():
        if key == "name":
            choice.name = str(value)
        elif key == "path":
            choice.path = str(value)
        elif key in SCENARIO_OVERRIDE_KEYS:
            choice.overrides[key] = value
        else:
            raise ConfigError(f"unknown key [scenario].{key}")
    settings.scenario = choice

    for section, cls in _SECTION_TYPES.items():
        payload = data.pop(section, {})
        obj = _build_section(section, payload, cls)
        attr = "field_params" if section == "field" else section
        setattr(settings, attr, obj)

    if data:
        raise ConfigError(f"unknown section [{next(iter(data))}]")
    settings.train.seed = settings.seed
    return settings


def load_run_config(path: str | Path) -> RunSettings:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    return parse_run_config(data, source=str(path))


def settings_snapshot(settings: RunSettings) -> dict:
    """JSON-friendly snapshot of every knob, for run manifests."""
    return {
        "version": CONFIG_VERSION,
        "run": {"seed": settings.seed, "single_thread": settings.single_thread},
        "scenario": {
            "name": settings.scenario.name,
            "path": settings.scenario.path,
            **settings.scenario.overrides,
        },
        "weave": dataclasses.asdict(settings.weave),
        "field": dataclasses.asdict(settings.field_params),
        "net": dataclasses.asdict(settings.net),
        "loss": dataclasses.asdict(settings.loss),
        "reward": dataclasses.asdict(settings.reward),
        "train": dataclasses.asdict(settings.train),
    }
