"""Lane-graph scenarios: geometry, arc-length paths and TOML round-trip.

A scenario is a set of lane centerline polylines plus spawn points, each
spawn carrying a route (a sequence of lane ids) that concatenates into the
vehicle's reference path.  Three parameterized builders ship with the
package: a two-stream merge, a skewed crossing (weave), and a closed loop
with a bypass branch.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on interpreter version
    import tomli as tomllib


def _segments_intersect(a0, a1, b0, b1) -> bool:
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])

    d1 = orient(b0, b1, a0)
    d2 = orient(b0, b1, a1)
    d3 = orient(a0, a1, b0)
    d4 = orient(a0, a1, b1)
    return ((d1 > 0) != (d2 > 0)) and ((d3 > 0) != (d4 > 0))


@dataclass(frozen=True)
class Lane:
    lane_id: str
    centerline: np.ndarray
    width: float

    def __post_init__(self) -> None:
        pts = np.asarray(self.centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError(f"lane {self.lane_id}: centerline must be an (n>=2, 2) array")
        if self.width <= 0:
            raise ValueError(f"lane {self.lane_id}: width must be positive")
        object.__setattr__(self, "centerline", pts)
        n = pts.shape[0] - 1
        for i in range(n):
            for j in range(i + 2, n):
                if i == 0 and j == n - 1 and np.allclose(pts[0], pts[-1]):
                    continue  # closed polyline shares its endpoints
                if _segments_intersect(pts[i], pts[i + 1], pts[j], pts[j + 1]):
                    raise ValueError(f"lane {self.lane_id}: centerline self-intersects")


@dataclass(frozen=True)
class Spawn:
    lane_id: str
    offset: float
    route: tuple[str, ...]
    closed: bool = False


class Path:
    """Polyline with arc-length lookup, projection and discrete curvature."""

    def __init__(self, points: np.ndarray, widths: np.ndarray, closed: bool = False):
        pts = np.asarray(points, dtype=float)
        wds = np.asarray(widths, dtype=float)
        keep = np.ones(len(pts), dtype=bool)
        keep[1:] = np.any(np.abs(np.diff(pts, axis=0)) > 1e-12, axis=1)
        pts, wds = pts[keep], wds[keep]
        if closed and not np.allclose(pts[0], pts[-1]):
            pts = np.vstack([pts, pts[0]])
            wds = np.append(wds, wds[0])
        self.points = pts
        self.widths = wds
        self.closed = closed
        seg = np.diff(pts, axis=0)
        self.seg_len = np.hypot(seg[:, 0], seg[:, 1])
        self.seg_dir = seg / self.seg_len[:, None]
        self.seg_heading = np.arctan2(seg[:, 1], seg[:, 0])
        self.cum = np.concatenate([[0.0], np.cumsum(self.seg_len)])
        self.length = float(self.cum[-1])
        # discrete curvature at interior vertices (heading change per meter)
        n_seg = len(self.seg_len)
        kappa = np.zeros(n_seg)
        for k in range(1 if not closed else 0, n_seg):
            prev = self.seg_heading[k - 1]
            dth = math.remainder(self.seg_heading[k] - prev, 2 * math.pi)
            ds = 0.5 * (self.seg_len[k - 1] + self.seg_len[k])
            kappa[k] = dth / ds
        self._kappa = kappa

    def _clamp_arc(self, arc: float) -> float:
        if self.closed:
            return arc % self.length
        return min(max(arc, 0.0), self.length)

    def _segment_of(self, arc: float) -> tuple[int, float]:
        arc = self._clamp_arc(arc)
        k = int(np.searchsorted(self.cum, arc, side="right") - 1)
        k = min(max(k, 0), len(self.seg_len) - 1)
        return k, arc - self.cum[k]

    def state_at(self, arc: float) -> tuple[np.ndarray, float]:
        k, rem = self._segment_of(arc)
        return self.points[k] + self.seg_dir[k] * rem, float(self.seg_heading[k])

    def width_at(self, arc: float) -> float:
        k, _ = self._segment_of(arc)
        return float(self.widths[k])

    def curvature_at(self, arc: float) -> float:
        k, _ = self._segment_of(arc)
        return float(self._kappa[k])

    def project(self, point: np.ndarray) -> tuple[float, float]:
        """Nearest path point; returns (arc length, signed lateral offset)."""
        p = np.asarray(point, dtype=float)
        d = p - self.points[:-1]
        t = np.clip((d * self.seg_dir).sum(axis=1) / self.seg_len, 0.0, 1.0)
        foot = self.points[:-1] + (t * self.seg_len)[:, None] * self.seg_dir
        dist2 = ((p - foot) ** 2).sum(axis=1)
        k = int(np.argmin(dist2))
        rel = p - foot[k]
        lateral = self.seg_dir[k, 0] * rel[1] - self.seg_dir[k, 1] * rel[0]
        return float(self.cum[k] + t[k] * self.seg_len[k]), float(lateral)


@dataclass
class Scenario:
    name: str
    lanes: dict[str, Lane]
    spawns: list[Spawn]
    v_max: float = 8.0
    a_max: float = 4.0
    steer_max: float = 0.5
    n_vehicles: int = 4
    episode_len: int = 1200
    dt: float = 0.05
    vehicle_radius: float = 0.75
    wheelbase: float = 2.5
    spawn_speed_frac: float = 0.5
    spawn_jitter: float = 2.0
    lookahead: float = 5.0
    routes: list[Path] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")
        if self.episode_len < 1:
            raise ValueError("episode_len must be positive")
        if self.n_vehicles > len(self.spawns):
            raise ValueError("n_vehicles cannot exceed the number of spawn points")
        if not self.routes:
            self.routes = [self._resolve_route(sp) for sp in self.spawns]

    def _resolve_route(self, spawn: Spawn) -> Path:
        pts: list[np.ndarray] = []
        wds: list[np.ndarray] = []
        for lane_id in spawn.route:
            if lane_id not in self.lanes:
                raise ValueError(f"spawn references unknown lane {lane_id!r}")
            lane = self.lanes[lane_id]
            pts.append(lane.centerline)
            wds.append(np.full(len(lane.centerline), lane.width))
        return Path(np.vstack(pts), np.concatenate(wds), closed=spawn.closed)


# ---------------------------------------------------------------------------
# builders


def _arc_points(radius: float, a0: float, a1: float, n: int) -> np.ndarray:
    ang = np.linspace(a0, a1, n)
    return np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])


def make_merge(
    approach_len: float = 25.0,
    exit_len: float = 20.0,
    ramp_angle: float = 0.45,
    lane_width: float = 12.0,
    spawn_offsets: tuple[float, ...] = (0.0, 5.0, 10.0),
    **kw,
) -> Scenario:
    """Two streams joining: a main lane and an on-ramp meeting at the origin.

    Defaults give the desk-scale conflict cycle used by the trend benchmark:
    short synchronized approaches, a wide corridor (so lane keeping is easy
    and agent-agent conflicts dominate) and a generous disc footprint.
    """
    main = Lane("main", np.array([[-approach_len, 0.0], [exit_len, 0.0]]), lane_width)
    exit_lane = Lane("exit", np.array([[0.0, 0.0], [exit_len, 0.0]]), lane_width)
    ramp_start = np.array([-approach_len * math.cos(ramp_angle), -approach_len * math.sin(ramp_angle)])
    ramp = Lane("ramp", np.array([ramp_start, [0.0, 0.0]]), lane_width)
    spawns = []
    for off in spawn_offsets:
        spawns.append(Spawn("main", off, ("main",)))
        spawns.append(Spawn("ramp", off, ("ramp", "exit")))
    kw.setdefault("vehicle_radius", 1.2)
    kw.setdefault("spawn_speed_frac", 0.75)
    kw.setdefault("spawn_jitter", 0.4)
    return Scenario("merge", {"main": main, "exit": exit_lane, "ramp": ramp}, spawns, **kw)


def make_weave(
    half_len: float = 40.0,
    half_span: float = 8.0,
    lane_width: float = 3.5,
    **kw,
) -> Scenario:
    """Skewed crossing: two straight streams swapping sides through the origin."""
    up = Lane("up", np.array([[-half_len, -half_span], [half_len, half_span]]), lane_width)
    down = Lane("down", np.array([[-half_len, half_span], [half_len, -half_span]]), lane_width)
    spawns = []
    for off in (0.0, 16.0, 32.0):
        spawns.append(Spawn("up", off, ("up",)))
        spawns.append(Spawn("down", off, ("down",)))
    return Scenario("weave", {"up": up, "down": down}, spawns, **kw)


def make_loop(
    radius: float = 18.0,
    junction_angle: float = math.pi / 3,
    lane_width: float = 4.0,
    **kw,
) -> Scenario:
    """Closed circuit with a straight bypass chord across one side."""
    ring = Lane("ring", _arc_points(radius, 0.0, 2 * math.pi, 49), lane_width)
    # Bypass traffic rides the ring from +junction to -junction (the long way
    # around), then cuts back across the chord.
    long_arc = Lane(
        "long_arc",
        _arc_points(radius, junction_angle, 2 * math.pi - junction_angle, 40),
        lane_width,
    )
    chord_pts = np.array(
        [
            [radius * math.cos(-junction_angle), radius * math.sin(-junction_angle)],
            [radius * math.cos(junction_angle), radius * math.sin(junction_angle)],
        ]
    )
    chord = Lane("chord", chord_pts, lane_width)
    spawns = []
    ring_len = 2 * math.pi * radius
    for off in (0.0, ring_len / 3, 2 * ring_len / 3):
        spawns.append(Spawn("ring", off, ("ring",), closed=True))
    bypass_len = (2 * math.pi - 2 * junction_angle) * radius + float(
        np.hypot(*(chord_pts[1] - chord_pts[0]))
    )
    for off in (0.0, bypass_len / 3, 2 * bypass_len / 3):
        spawns.append(Spawn("long_arc", off, ("long_arc", "chord"), closed=True))
    return Scenario("loop", {"ring": ring, "long_arc": long_arc, "chord": chord}, spawns, **kw)


_BUILDERS = {"merge": make_merge, "weave": make_weave, "loop": make_loop}


def builtin_scenario(name: str, **kw) -> Scenario:
    if name not in _BUILDERS:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(_BUILDERS)}")
    return _BUILDERS[name](**kw)


# ---------------------------------------------------------------------------
# TOML round-trip

_SCALAR_KEYS = (
    "v_max",
    "a_max",
    "steer_max",
    "n_vehicles",
    "episode_len",
    "dt",
    "vehicle_radius",
    "wheelbase",
    "spawn_speed_frac",
    "spawn_jitter",
    "lookahead",
)


def scenario_to_toml(sc: Scenario) -> str:
    lines = [f'name = "{sc.name}"']
    for key in _SCALAR_KEYS:
        v = getattr(sc, key)
        lines.append(f"{key} = {v!r}" if isinstance(v, int) else f"{key} = {float(v)!r}")
    for lane in sc.lanes.values():
        lines.append("")
        lines.append("[[lanes]]")
        lines.append(f'lane_id = "{lane.lane_id}"')
        lines.append(f"width = {float(lane.width)!r}")
        rows = ", ".join(f"[{float(p[0])!r}, {float(p[1])!r}]" for p in lane.centerline)
        lines.append(f"centerline = [{rows}]")
    for sp in sc.spawns:
        lines.append("")
        lines.append("[[spawns]]")
        lines.append(f'lane_id = "{sp.lane_id}"')
        lines.append(f"offset = {float(sp.offset)!r}")
        route = ", ".join(f'"{r}"' for r in sp.route)
        lines.append(f"route = [{route}]")
        lines.append(f"closed = {'true' if sp.closed else 'false'}")
    return "\n".join(lines) + "\n"


def scenario_from_dict(data: dict) -> Scenario:
    lanes = {
        entry["lane_id"]: Lane(entry["lane_id"], np.asarray(entry["centerline"], float), float(entry["width"]))
        for entry in data["lanes"]
    }
    spawns = [
        Spawn(e["lane_id"], float(e["offset"]), tuple(e["route"]), bool(e.get("closed", False)))
        for e in data["spawns"]
    ]
    kwargs = {k: data[k] for k in _SCALAR_KEYS if k in data}
    return Scenario(data.get("name", "custom"), lanes, spawns, **kwargs)


def load_scenario(path: str | FsPath, **overrides) -> Scenario:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    data.update(overrides)
    return scenario_from_dict(data)
