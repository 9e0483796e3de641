"""Kinematic multi-vehicle stepping, observations, collisions and reward.

Vehicles are discs following spawn-assigned reference paths under bicycle
kinematics.  Colliding vehicles, and vehicles that finish an open route,
are relocated to a free spawn point on the next step, so the number of
active vehicles stays constant across an episode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..weaving import wrap_angle
from .scenario import Scenario

_RESPAWN_CLEARANCE_FACTOR = 4.0  # clearance radius in vehicle radii
_ROUTE_END_MARGIN = 1.0  # meters before the end of an open route


def _wrap_array(theta: np.ndarray) -> np.ndarray:
    w = np.mod(theta, 2.0 * math.pi)
    w[w > math.pi] -= 2.0 * math.pi
    return w


@dataclass
class JointState:
    pos: np.ndarray  # (N, 2)
    heading: np.ndarray  # (N,)
    speed: np.ndarray  # (N,)
    progress: np.ndarray  # (N,) cumulative meters along the route
    arc: np.ndarray  # (N,) path-relative arc length (cached projection)
    lateral: np.ndarray  # (N,) signed lateral offset (cached projection)
    spawn_idx: np.ndarray  # (N,) route assignment
    last_cmd: np.ndarray  # (N, 2)
    pending_respawn: np.ndarray  # (N,) bool
    alive: np.ndarray  # (N,) bool

    _FIELDS = (
        "pos", "heading", "speed", "progress", "arc", "lateral",
        "spawn_idx", "last_cmd", "pending_respawn", "alive",
    )

    @property
    def n(self) -> int:
        return self.pos.shape[0]

    def copy(self) -> "JointState":
        return JointState(*(np.copy(getattr(self, f)) for f in self._FIELDS))


@dataclass
class StepEvents:
    agent_agent: np.ndarray  # (N,) bool
    agent_map: np.ndarray  # (N,) bool
    respawned: np.ndarray  # (N,) bool


@dataclass
class Observation:
    ego: np.ndarray  # (5,): speed frac, heading error, lateral frac, curvature ahead, progress frac
    neighbors: np.ndarray  # (M, 5): rel x, rel y, rel heading, rel speed, valid
    slot_ids: np.ndarray  # (M,) agent id per slot, -1 when padded


@dataclass
class RewardWeights:
    progress: float = 1.0
    collision: float = 10.0
    offroad: float = 10.0
    smooth: float = 0.1


def initial_state(scenario: Scenario, rng: np.random.Generator | None = None) -> JointState:
    n = scenario.n_vehicles
    pos = np.zeros((n, 2))
    heading = np.zeros(n)
    arc = np.zeros(n)
    for i in range(n):
        sp = scenario.spawns[i]
        path = scenario.routes[i]
        off = sp.offset
        if rng is not None and scenario.spawn_jitter > 0:
            off += rng.uniform(0.0, scenario.spawn_jitter)
        off = off % path.length if path.closed else min(off, path.length)
        pos[i], heading[i] = path.state_at(off)
        arc[i] = off
    return JointState(
        pos=pos,
        heading=heading,
        speed=np.full(n, scenario.spawn_speed_frac * scenario.v_max),
        progress=arc.copy(),
        arc=arc,
        lateral=np.zeros(n),
        spawn_idx=np.arange(n),
        last_cmd=np.zeros((n, 2)),
        pending_respawn=np.zeros(n, dtype=bool),
        alive=np.ones(n, dtype=bool),
    )


def _free_spawn(scenario: Scenario, pos: np.ndarray, exclude: int) -> int:
    clearance = _RESPAWN_CLEARANCE_FACTOR * scenario.vehicle_radius
    others = np.delete(pos, exclude, axis=0)
    best, best_gap = 0, -1.0
    for k, sp in enumerate(scenario.spawns):
        p, _ = scenario.routes[k].state_at(sp.offset)
        gap = float(np.min(np.hypot(*(others - p).T))) if len(others) else np.inf
        if gap > clearance:
            return k
        if gap > best_gap:
            best, best_gap = k, gap
    return best


def _agent_agent_flags(state: JointState, scenario: Scenario) -> np.ndarray:
    diff = state.pos[:, None, :] - state.pos[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    np.fill_diagonal(dist, np.inf)
    return np.any(dist < 2.0 * scenario.vehicle_radius, axis=1)


def _agent_map_flags_cached(state: JointState, scenario: Scenario) -> np.ndarray:
    am = np.zeros(state.n, dtype=bool)
    for i in range(state.n):
        path = scenario.routes[state.spawn_idx[i]]
        am[i] = abs(state.lateral[i]) > path.width_at(state.arc[i]) / 2.0 - scenario.vehicle_radius
    return am


def detect_collisions(state: JointState, scenario: Scenario) -> tuple[np.ndarray, np.ndarray]:
    """Per-agent (agent_agent, agent_map) flags, from fresh path projections."""
    aa = _agent_agent_flags(state, scenario)
    am = np.zeros(state.n, dtype=bool)
    for i in range(state.n):
        path = scenario.routes[state.spawn_idx[i]]
        arc, lateral = path.project(state.pos[i])
        am[i] = abs(lateral) > path.width_at(arc) / 2.0 - scenario.vehicle_radius
    return aa, am


def step(state: JointState, commands: np.ndarray, scenario: Scenario) -> tuple[JointState, StepEvents]:
    """Advance all vehicles one step; commands are clamped, never rejected."""
    n = state.n
    cmds = np.clip(np.asarray(commands, dtype=float).reshape(n, 2), -1.0, 1.0)
    nxt = state.copy()
    respawned = np.zeros(n, dtype=bool)

    for i in range(n):
        if not state.pending_respawn[i]:
            continue
        k = _free_spawn(scenario, nxt.pos, exclude=i)
        sp = scenario.spawns[k]
        path = scenario.routes[k]
        nxt.spawn_idx[i] = k
        nxt.pos[i], nxt.heading[i] = path.state_at(sp.offset)
        nxt.speed[i] = scenario.spawn_speed_frac * scenario.v_max
        nxt.arc[i] = sp.offset
        nxt.lateral[i] = 0.0
        nxt.progress[i] = sp.offset
        nxt.pending_respawn[i] = False
        respawned[i] = True

    move = ~respawned
    dt = scenario.dt
    speed_new = np.clip(
        nxt.speed[move] + cmds[move, 0] * scenario.a_max * dt, 0.0, scenario.v_max
    )
    heading_new = _wrap_array(
        nxt.heading[move]
        + (nxt.speed[move] / scenario.wheelbase) * np.tan(cmds[move, 1] * scenario.steer_max) * dt
    )
    nxt.pos[move, 0] += speed_new * dt * np.cos(heading_new)
    nxt.pos[move, 1] += speed_new * dt * np.sin(heading_new)
    nxt.speed[move] = speed_new
    nxt.heading[move] = heading_new

    for i in np.flatnonzero(move):
        path = scenario.routes[nxt.spawn_idx[i]]
        arc, lateral = path.project(nxt.pos[i])
        if path.closed:
            nxt.progress[i] += math.remainder(arc - nxt.arc[i], path.length)
        else:
            nxt.progress[i] = arc
            if arc >= path.length - _ROUTE_END_MARGIN:
                nxt.pending_respawn[i] = True
        nxt.arc[i] = arc
        nxt.lateral[i] = lateral

    aa = _agent_agent_flags(nxt, scenario)
    am = _agent_map_flags_cached(nxt, scenario)
    nxt.pending_respawn |= aa | am
    nxt.last_cmd = cmds
    return nxt, StepEvents(agent_agent=aa, agent_map=am, respawned=respawned)


def reward(
    prev: JointState,
    nxt: JointState,
    agent_id: int,
    events: StepEvents,
    weights: RewardWeights,
    scenario: Scenario,
) -> float:
    """Shaped per-step reward: normalized progress minus event penalties."""
    i = agent_id
    dprog = 0.0 if events.respawned[i] else nxt.progress[i] - prev.progress[i]
    r = weights.progress * dprog / (scenario.v_max * scenario.dt)
    if events.agent_agent[i]:
        r -= weights.collision
    if events.agent_map[i]:
        r -= weights.offroad
    r -= weights.smooth * float(np.abs(nxt.last_cmd[i] - prev.last_cmd[i]).sum()) / 2.0
    return float(r)


def rewards_all(
    prev: JointState, nxt: JointState, events: StepEvents, weights: RewardWeights, scenario: Scenario
) -> np.ndarray:
    return np.array([reward(prev, nxt, i, events, weights, scenario) for i in range(prev.n)])


def _ego_features(state: JointState, i: int, scenario: Scenario) -> np.ndarray:
    path = scenario.routes[state.spawn_idx[i]]
    arc = state.arc[i]
    k, _ = path._segment_of(arc)
    return np.array(
        [
            state.speed[i] / scenario.v_max,
            wrap_angle(state.heading[i] - path.seg_heading[k]),
            state.lateral[i] / (path.widths[k] / 2.0),
            path.curvature_at(arc + scenario.lookahead),
            (arc % path.length if path.closed else arc) / path.length,
        ]
    )


def observe(state: JointState, agent_id: int, scenario: Scenario, m: int) -> Observation:
    """Local observation: ego path-relative features plus the m nearest
    neighbors in the ego frame, nearest first, zero-padded with validity 0."""
    if not (0 <= agent_id < state.n) or not state.alive[agent_id]:
        raise ValueError(f"agent {agent_id} is not an alive agent")
    ego, nbr, ids = observe_all(state, scenario, m)
    return Observation(ego=ego[agent_id], neighbors=nbr[agent_id], slot_ids=ids[agent_id])


def observe_all(state: JointState, scenario: Scenario, m: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked observations for every agent: (ego (N,5), nbr (N,M,5), ids).

    Equivalent to calling ``observe`` per agent, vectorized over neighbors.
    """
    n = state.n
    ego = np.zeros((n, 5))
    for i in range(n):
        ego[i] = _ego_features(state, i, scenario)
    nbr = np.zeros((n, m, 5))
    ids = np.full((n, m), -1, dtype=int)
    k = min(m, n - 1)
    if k > 0:
        rel = state.pos[None, :, :] - state.pos[:, None, :]  # [i, j] = pos_j - pos_i
        dist = np.hypot(rel[..., 0], rel[..., 1])
        np.fill_diagonal(dist, np.inf)
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]  # (N, k)
        rows = np.arange(n)[:, None]
        dx = rel[rows, order, 0]
        dy = rel[rows, order, 1]
        c = np.cos(state.heading)[:, None]
        s = np.sin(state.heading)[:, None]
        nbr[:, :k, 0] = c * dx + s * dy
        nbr[:, :k, 1] = -s * dx + c * dy
        nbr[:, :k, 2] = _wrap_array(state.heading[order] - state.heading[:, None])
        nbr[:, :k, 3] = (state.speed[order] - state.speed[:, None]) / scenario.v_max
        nbr[:, :k, 4] = 1.0
        ids[:, :k] = order
    return ego, nbr, ids


class Simulator:
    """Stateful convenience wrapper around the functional engine."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.state: JointState | None = None

    def reset(self, rng: np.random.Generator | None = None) -> JointState:
        self.state = initial_state(self.scenario, rng)
        return self.state

    def step(self, commands: np.ndarray) -> tuple[JointState, StepEvents]:
        if self.state is None:
            raise RuntimeError("reset() must be called before step()")
        self.state, events = step(self.state, commands, self.scenario)
        return self.state, events

    def observe_all(self, m: int):
        return observe_all(self.state, self.scenario, m)
