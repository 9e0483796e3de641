from .scenario import Lane, Path, Scenario, Spawn, builtin_scenario, load_scenario
from .engine import (
    JointState,
    Observation,
    RewardWeights,
    Simulator,
    StepEvents,
    detect_collisions,
    initial_state,
    observe,
    reward,
    step,
)
from .metrics import EpisodeLog, average_speed, collision_rate, metrics_summary, smoothness

__all__ = [
    "Lane",
    "Path",
    "Scenario",
    "Spawn",
    "builtin_scenario",
    "load_scenario",
    "JointState",
    "Observation",
    "RewardWeights",
    "Simulator",
    "StepEvents",
    "detect_collisions",
    "initial_state",
    "observe",
    "reward",
    "step",
    "EpisodeLog",
    "average_speed",
    "collision_rate",
    "metrics_summary",
    "smoothness",
]
