"""Episode logs and the safety / efficiency / smoothness metric triple.

Collision rate counts steps on which at least one agent has a collision
flag, split into agent-agent and agent-map events; average speed normalizes
by the speed cap; smoothness averages step-to-step command changes over the
unit command range, so constant commands score zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EpisodeLog:
    t: np.ndarray  # (T,)
    x: np.ndarray  # (T, N)
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    lon: np.ndarray
    steer: np.ndarray
    coll_aa: np.ndarray  # (T, N) bool
    coll_am: np.ndarray
    respawned: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.x.ndim != 2 or self.t.shape[0] != self.x.shape[0]:
            raise ValueError("log arrays must be (T,) and (T, N)")

    @property
    def n_steps(self) -> int:
        return self.x.shape[0]

    @property
    def n_agents(self) -> int:
        return self.x.shape[1]


def collision_rate(log: EpisodeLog) -> tuple[float, float, float]:
    """(CR, CR_AA, CR_AM) in percent of steps with any event of that kind."""
    if log.n_steps == 0:
        raise ValueError("empty log")
    t = log.n_steps
    cr_aa = 100.0 / t * float(np.count_nonzero(np.any(log.coll_aa, axis=1)))
    cr_am = 100.0 / t * float(np.count_nonzero(np.any(log.coll_am, axis=1)))
    return cr_aa + cr_am, cr_aa, cr_am


def average_speed(log: EpisodeLog, v_max: float) -> float:
    if log.n_steps == 0:
        raise ValueError("empty log")
    return 100.0 * float(np.mean(log.speed)) / v_max


def smoothness(log: EpisodeLog, beta: float = 0.5) -> tuple[float, float, float]:
    """(SM, SM_LO, SM_LA) in percent; commands live in [-1, 1], range 2."""
    if log.n_steps < 2:
        raise ValueError("smoothness needs at least 2 steps")
    sm_lo = 100.0 * float(np.mean(np.abs(np.diff(log.lon, axis=0)))) / 2.0
    sm_la = 100.0 * float(np.mean(np.abs(np.diff(log.steer, axis=0)))) / 2.0
    return beta * sm_lo + (1.0 - beta) * sm_la, sm_lo, sm_la


def metrics_summary(logs: list[EpisodeLog], v_max: float, beta: float = 0.5) -> dict[str, float]:
    """Metric triple averaged over episodes."""
    rows = []
    for log in logs:
        cr, cr_aa, cr_am = collision_rate(log)
        sm, sm_lo, sm_la = smoothness(log, beta)
        rows.append((cr, cr_aa, cr_am, average_speed(log, v_max), sm, sm_lo, sm_la))
    mean = np.mean(np.asarray(rows), axis=0)
    keys = ("CR", "CR_AA", "CR_AM", "AS", "SM", "SM_LO", "SM_LA")
    return {k: float(v) for k, v in zip(keys, mean)}
