"""Agent-centric frames and weaving-based pairwise priorities.

Two future trajectories "weave" when, seen from one agent's local
lateral-longitudinal frame, their lateral profiles come close and tend to
swap sides.  The per-step near-crossing score divides the closest lateral
separation of two consecutive steps by a term that grows when the gap
changes sign, so imminent braid-like crossings score low.  The minimum of
this score over the horizon is the directed weaving distance, and a
two-class softmax over the two directed distances of a pair yields
asymmetric priority probabilities that sum to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Stand-in for an infinite weaving distance when a pair has too few points.
WEAVE_SENTINEL = 1e9


def wrap_angle(theta: float) -> float:
    """Normalize an angle to the half-open interval (-pi, pi]."""
    w = math.fmod(theta, 2.0 * math.pi)
    if w > math.pi:
        w -= 2.0 * math.pi
    elif w <= -math.pi:
        w += 2.0 * math.pi
    return w


@dataclass(frozen=True)
class Pose2:
    """Planar pose; heading is normalized to (-pi, pi] on construction."""

    x: float
    y: float
    heading: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y) and math.isfinite(self.heading)):
            raise ValueError("pose coordinates must be finite")
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class Trajectory:
    """A horizon of 2-D positions for one agent.

    ``positions`` has shape (L, 2) with L >= 2; ``start_time`` is the step
    index of the first point.
    """

    positions: np.ndarray
    start_time: int = 0

    def __post_init__(self) -> None:
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim != 2 or pos.shape[1] != 2:
            raise ValueError("trajectory positions must have shape (L, 2)")
        if pos.shape[0] < 2:
            raise ValueError("trajectory needs at least 2 points")
        if not np.all(np.isfinite(pos)):
            raise ValueError("trajectory positions must be finite")
        object.__setattr__(self, "positions", pos)

    def __len__(self) -> int:
        return self.positions.shape[0]


@dataclass(frozen=True)
class WeaveParams:
    """Stabilizer, softmax temperature and horizon for weaving analysis."""

    epsilon: float = 0.1
    tau: float = 1.0
    horizon: int = 25

    def __post_init__(self) -> None:
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")


def to_local_frame(traj: Trajectory, ego: Pose2) -> Trajectory:
    """Map trajectory points into the ego frame whose x-axis is the heading."""
    c = math.cos(ego.heading)
    s = math.sin(ego.heading)
    d = traj.positions - ego.position
    local = np.column_stack((c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1]))
    return Trajectory(local, traj.start_time)


def lateral_gap(ego_lateral: np.ndarray, nbr_lateral: np.ndarray) -> np.ndarray:
    """Elementwise lateral separation between two profiles of equal length."""
    a = np.asarray(ego_lateral, dtype=float)
    b = np.asarray(nbr_lateral, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("lateral profiles must be 1-D and of equal length")
    return a - b


def near_crossing_scores(gap: np.ndarray, epsilon: float) -> np.ndarray:
    """Per-step near-crossing scores of a lateral-gap profile.

    The score at step h is min(|gap[h]|, |gap[h+1]|) divided by
    epsilon + max(0, -gap[h]*gap[h+1]); sign changes inflate the denominator
    and drive the score toward zero.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    g = np.asarray(gap, dtype=float)
    if g.ndim != 1 or g.shape[0] < 2:
        raise ValueError("gap profile needs at least 2 points")
    num = np.minimum(np.abs(g[:-1]), np.abs(g[1:]))
    den = epsilon + np.maximum(0.0, -g[:-1] * g[1:])
    return num / den


def weaving_distance(scores: np.ndarray) -> float:
    """Most critical (smallest) near-crossing score over the horizon."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("score sequence must be non-empty")
    return float(np.min(s))


def directed_weaving_distance(
    traj_i: Trajectory, traj_j: Trajectory, ego: Pose2, params: WeaveParams
) -> float:
    """Weaving distance of pair (i, j) evaluated in agent i's frame.

    Both trajectories are truncated to the common available length, capped at
    horizon+1 points.  Pairs with fewer than 2 common points get the sentinel
    distance, which the priority softmax maps to 1/2 when both directions are
    sentinel.
    """
    n = min(len(traj_i), len(traj_j), params.horizon + 1)
    if n < 2:
        return WEAVE_SENTINEL
    lat_i = to_local_frame(Trajectory(traj_i.positions[:n]), ego).positions[:, 1]
    lat_j = to_local_frame(Trajectory(traj_j.positions[:n]), ego).positions[:, 1]
    return weaving_distance(near_crossing_scores(lateral_gap(lat_i, lat_j), params.epsilon))


def pairwise_priority(d_ij: float, d_ji: float, tau: float) -> tuple[float, float]:
    """Two-class softmax over directed weaving distances.

    Returns (p_ij, p_ji) with p_ji computed as 1 - p_ij so the pair sums to
    one exactly.  The exponent is shifted by the smaller argument, so very
    large distances cannot overflow.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if d_ij < 0 or d_ji < 0:
        raise ValueError("weaving distances must be nonnegative")
    a = -d_ij / tau
    b = -d_ji / tau
    m = max(a, b)
    ea = math.exp(a - m)
    eb = math.exp(b - m)
    p_ij = ea / (ea + eb)
    return p_ij, 1.0 - p_ij


def preference_signal(p_ij: float, p_ji: float) -> float:
    """Antisymmetric preference p_ji - p_ij; requires reciprocity."""
    if abs(p_ij + p_ji - 1.0) > 1e-12:
        raise ValueError("priority pair violates reciprocity (must sum to 1)")
    return p_ji - p_ij
