"""Directed priority graphs and the scalar priority field.

Edges carry asymmetric probabilities p (how strongly the source dominates
the destination in their weaving relation), a confidence weight |p - 1/2|^a
and the antisymmetric preference 1 - 2p.  Node scores are recovered by
confidence-weighted least squares on score differences under a zero-sum
gauge, short directed dominance loops are neutralized offline, and the
result serves as training labels only; nothing here runs at execution time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .weaving import WEAVE_SENTINEL, Pose2, Trajectory, WeaveParams, pairwise_priority


@dataclass
class DirectedEdge:
    """Edge (src -> dst): src can constrain dst, with probability ``p``."""

    src: int
    dst: int
    p: float
    confidence: float
    preference: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("edge probability must lie in [0, 1]")
        if self.confidence < 0:
            raise ValueError("edge confidence must be nonnegative")

    @classmethod
    def from_p(cls, src: int, dst: int, p: float, alpha: float) -> "DirectedEdge":
        return cls(src=src, dst=dst, p=p, confidence=confidence_weight(p, alpha), preference=1.0 - 2.0 * p)


@dataclass
class FieldParams:
    """Knobs for edge construction, score recovery and de-cycling."""

    alpha: float = 1.0
    tau_s: float = 1.0
    interaction_radius: float = 15.0
    max_cycle_len: int = 3
    max_neighbors: int = 4

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.tau_s <= 0:
            raise ValueError("tau_s must be positive")
        if self.interaction_radius <= 0:
            raise ValueError("interaction_radius must be positive")
        if self.max_cycle_len < 2:
            raise ValueError("max_cycle_len must be at least 2")
        if self.max_neighbors < 1:
            raise ValueError("max_neighbors must be at least 1")


@dataclass
class PriorityGraph:
    """Directed graph over agent ids with optional per-node scores."""

    node_ids: list[int]
    edges: list[DirectedEdge] = field(default_factory=list)
    scores: dict[int, float] | None = None

    def validate(self) -> None:
        nodes = set(self.node_ids)
        seen: dict[tuple[int, int], float] = {}
        for e in self.edges:
            if e.src not in nodes or e.dst not in nodes:
                raise ValueError(f"edge ({e.src}->{e.dst}) references unknown node")
            key = (e.src, e.dst)
            if key in seen:
                raise ValueError(f"duplicate edge for ordered pair {key}")
            seen[key] = e.p
        for (a, b), p in seen.items():
            if (b, a) in seen and abs(p + seen[(b, a)] - 1.0) > 1e-9:
                raise ValueError(f"pair ({a},{b}) violates reciprocity")
        if self.scores is not None:
            if set(self.scores) != nodes:
                raise ValueError("scores must cover exactly the node set")
            if abs(sum(self.scores.values())) > 1e-9:
                raise ValueError("scores must sum to zero")

    def edge_map(self) -> dict[tuple[int, int], DirectedEdge]:
        return {(e.src, e.dst): e for e in self.edges}


def confidence_weight(p: float, alpha: float) -> float:
    """Confidence |p - 1/2|^alpha; a tie has zero confidence for any alpha."""
    base = abs(p - 0.5)
    if base == 0.0:
        return 0.0
    return base**alpha


def score_induced_prob(s_i: float, s_j: float, tau_s: float) -> float:
    """Probability implied by two node scores, logistic((s_j - s_i)/tau_s)."""
    if tau_s <= 0:
        raise ValueError("tau_s must be positive")
    z = (s_j - s_i) / tau_s
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def solve_score_field(graph: PriorityGraph) -> dict[int, float]:
    """Least-squares node scores under the per-component zero-sum gauge.

    Minimizes 1/2 * sum_e c_e ((s_dst - s_src) - A_e)^2 via the weighted
    graph-Laplacian normal equations; the pseudoinverse solve projects onto
    the zero-mean subspace of every confidence-connected component, which is
    exactly the gauge constraint.  All-zero confidence yields all-zero scores.
    """
    if not graph.node_ids:
        raise ValueError("graph needs at least one node")
    idx = {nid: k for k, nid in enumerate(graph.node_ids)}
    n = len(graph.node_ids)
    lap = np.zeros((n, n))
    rhs = np.zeros(n)
    for e in graph.edges:
        i = idx[e.dst]
        j = idx[e.src]
        c = e.confidence
        lap[i, i] += c
        lap[j, j] += c
        lap[i, j] -= c
        lap[j, i] -= c
        rhs[i] += c * e.preference
        rhs[j] -= c * e.preference
    s = np.linalg.pinv(lap, rcond=1e-10) @ rhs
    return {nid: float(s[idx[nid]]) for nid in graph.node_ids}


def _orientation(edge_map: dict[tuple[int, int], DirectedEdge]) -> dict[tuple[int, int], float]:
    """Dominance arcs (winner -> loser) with their margin probability.

    An edge (j -> i) with p > 1/2 orients the pair as j over i; with p < 1/2
    the implied reverse probability orients i over j.  Ties produce no arc.
    """
    arcs: dict[tuple[int, int], float] = {}
    for (src, dst), e in edge_map.items():
        if e.p > 0.5:
            arcs[(src, dst)] = max(arcs.get((src, dst), 0.0), e.p)
        elif e.p < 0.5:
            arcs[(dst, src)] = max(arcs.get((dst, src), 0.0), 1.0 - e.p)
    return arcs


def _short_cycles(arcs: dict[tuple[int, int], float], max_len: int) -> list[tuple[int, ...]]:
    """All simple directed cycles of length <= max_len, as node tuples.

    Each cycle is rooted at its smallest node, so every cycle is produced
    exactly once.
    """
    out: list[tuple[int, ...]] = []
    succ: dict[int, list[int]] = {}
    for a, b in arcs:
        succ.setdefault(a, []).append(b)
    for v in succ:
        succ[v].sort()

    def walk(start: int, node: int, path: list[int]) -> None:
        for nxt in succ.get(node, ()):
            if nxt == start and len(path) >= 2:
                out.append(tuple(path))
            elif nxt > start and nxt not in path and len(path) < max_len:
                walk(start, nxt, path + [nxt])

    for start in sorted(succ):
        walk(start, start, [start])
    return out


def decycle(graph: PriorityGraph, max_cycle_len: int) -> PriorityGraph:
    """Neutralize low-confidence pairs until no short dominance cycle remains.

    Repeatedly finds directed cycles of length <= max_cycle_len among the
    oriented (p != 1/2) pairs and neutralizes the participating pair whose
    probability is closest to 1/2: both orientations get p = 1/2, confidence
    0 and preference 0.  The result is idempotent under re-application.
    """
    edges = [replace(e) for e in graph.edges]
    emap = {(e.src, e.dst): e for e in edges}
    while True:
        arcs = _orientation(emap)
        cycles = _short_cycles(arcs, max_cycle_len)
        if not cycles:
            break
        in_cycle: set[tuple[int, int]] = set()
        for cyc in cycles:
            for k in range(len(cyc)):
                in_cycle.add((cyc[k], cyc[(k + 1) % len(cyc)]))
        # Weakest pair first; deterministic tie-break on the arc endpoints.
        target = min(in_cycle, key=lambda ab: (arcs[ab] - 0.5, ab))
        for key in (target, (target[1], target[0])):
            if key in emap:
                e = emap[key]
                e.p = 0.5
                e.confidence = 0.0
                e.preference = 0.0
    return PriorityGraph(list(graph.node_ids), edges, scores=None)


def interaction_pairs(
    positions: dict[int, np.ndarray], radius: float, max_neighbors: int
) -> list[tuple[int, int]]:
    """Ordered pairs (src -> dst): src among dst's nearest in-range neighbors."""
    ids = sorted(positions)
    pairs = []
    for i in ids:
        cand = []
        for j in ids:
            if j == i:
                continue
            d = float(np.hypot(*(positions[j] - positions[i])))
            if d <= radius:
                cand.append((d, j))
        cand.sort()
        for _, j in cand[:max_neighbors]:
            pairs.append((j, i))
    return pairs


def build_labels(
    trajectories: dict[int, Trajectory],
    poses: dict[int, Pose2],
    weave: WeaveParams,
    field_params: FieldParams,
) -> PriorityGraph:
    """Full label pipeline for one timestep.

    Computes directed weaving distances for every interaction-relevant
    ordered pair, converts them to priority probabilities, preferences and
    confidences, removes short dominance cycles and solves for the scalar
    priority field.  A single agent yields one node with score zero.
    """
    if set(trajectories) != set(poses):
        raise ValueError("trajectories and poses must cover the same agents")
    ids = sorted(trajectories)
    if len(ids) == 1:
        return PriorityGraph(ids, [], scores={ids[0]: 0.0})

    positions = {i: poses[i].position for i in ids}
    pairs = interaction_pairs(positions, field_params.interaction_radius, field_params.max_neighbors)
    pair_set = set(pairs)

    # Distances evaluated frame-major: project every relevant trajectory
    # difference onto each ego's lateral axis once.
    needed: set[tuple[int, int]] = set()
    for src, dst in pairs:
        needed.add((dst, src))
        needed.add((src, dst))
    dists = _directed_distances(trajectories, poses, needed, weave)

    edges = []
    done: set[tuple[int, int]] = set()
    for src, dst in pairs:
        if (src, dst) in done:
            continue
        p_dst, p_src = pairwise_priority(dists[(dst, src)], dists[(src, dst)], weave.tau)
        edges.append(DirectedEdge.from_p(src, dst, p_dst, field_params.alpha))
        done.add((src, dst))
        if (dst, src) in pair_set:
            edges.append(DirectedEdge.from_p(dst, src, p_src, field_params.alpha))
            done.add((dst, src))

    graph = decycle(PriorityGraph(ids, edges), field_params.max_cycle_len)
    graph.scores = solve_score_field(graph)
    graph.validate()
    return graph


def rollout_label_arrays(
    positions: np.ndarray,
    headings: np.ndarray,
    weave: WeaveParams,
    field_params: FieldParams,
    n_label_steps: int | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized label pipeline over a whole logged rollout.

    ``positions`` is (L, N, 2) and ``headings`` (L, N); labels are produced
    for steps 0..n_label_steps-1 (default L-1, since a step needs at least
    two future points).  Returns (p, c, mask, scores) with pair arrays of
    shape (T, N, N) indexed [t, dst, src] and scores (T, N).  Semantics
    match applying ``build_labels`` step by step.
    """
    length, n, _ = positions.shape
    t_steps = length - 1 if n_label_steps is None else n_label_steps
    if t_steps > length - 1:
        raise ValueError("labels need at least two points per step")
    n_h = weave.horizon + 1

    lat = np.stack([-np.sin(headings), np.cos(headings)], axis=-1)  # (L, N, 2)
    diff = positions[:, :, None, :] - positions[:, None, :, :]  # (L, N, N, 2)
    gap = np.full((t_steps, n, n, n_h), np.nan)
    for h in range(min(n_h, length)):
        t_max = min(t_steps, length - h)
        if t_max <= 0:
            break
        gap[:t_max, :, :, h] = np.einsum("tic,tijc->tij", lat[:t_max], diff[h : h + t_max])

    g0, g1 = gap[..., :-1], gap[..., 1:]
    with np.errstate(invalid="ignore"):
        delta = np.minimum(np.abs(g0), np.abs(g1)) / (
            weave.epsilon + np.maximum(0.0, -g0 * g1)
        )
        all_nan = np.all(np.isnan(delta), axis=-1)
        d = np.where(
            all_nan, WEAVE_SENTINEL, np.min(np.where(np.isnan(delta), np.inf, delta), axis=-1)
        )

    # stable two-class softmax with exact reciprocity across each pair
    a = -d / weave.tau
    at = np.swapaxes(a, 1, 2)
    shift = np.maximum(a, at)
    ea = np.exp(a - shift)
    eb = np.exp(at - shift)
    p = ea / (ea + eb)
    iu, ju = np.triu_indices(n, 1)
    p[:, ju, iu] = 1.0 - p[:, iu, ju]

    base = np.abs(p - 0.5)
    c = np.where(base == 0.0, 0.0, base**field_params.alpha)
    pref = 1.0 - 2.0 * p

    dist0 = np.hypot(diff[:t_steps, ..., 0], diff[:t_steps, ..., 1])
    eye = np.eye(n, dtype=bool)
    dist0[:, eye] = np.inf
    rank = np.argsort(np.argsort(dist0, axis=2, kind="stable"), axis=2, kind="stable")
    mask = ((dist0 <= field_params.interaction_radius) & (rank < field_params.max_neighbors)).astype(float)

    for t in range(t_steps):
        _decycle_arrays(p[t], c[t], pref[t], mask[t], field_params.max_cycle_len)

    w = c * mask  # (T, N, N), weight of edge [t, dst, src]
    lap = -(w + np.swapaxes(w, 1, 2))
    diag = w.sum(axis=2) + w.sum(axis=1)
    lap[:, np.arange(n), np.arange(n)] = diag
    wa = w * pref
    b = wa.sum(axis=2) - wa.sum(axis=1)
    scores = np.einsum("tij,tj->ti", np.linalg.pinv(lap, rcond=1e-10), b)
    return p, c, mask, scores


def _decycle_arrays(p: np.ndarray, c: np.ndarray, pref: np.ndarray, mask: np.ndarray, max_len: int) -> None:
    """In-place pairwise neutralization on (N, N) label arrays for one step."""
    n = p.shape[0]
    arcs: dict[tuple[int, int], float] = {}
    for i in range(n):
        for j in range(i + 1, n):
            if mask[i, j] == 0.0 and mask[j, i] == 0.0:
                continue
            pij = p[i, j]  # probability that src j dominates dst i
            if pij > 0.5:
                arcs[(j, i)] = pij
            elif pij < 0.5:
                arcs[(i, j)] = 1.0 - pij
    while True:
        cycles = _short_cycles(arcs, max_len)
        if not cycles:
            return
        in_cycle: set[tuple[int, int]] = set()
        for cyc in cycles:
            for k in range(len(cyc)):
                in_cycle.add((cyc[k], cyc[(k + 1) % len(cyc)]))
        target = min(in_cycle, key=lambda ab: (arcs[ab] - 0.5, ab))
        x, y = target
        for i, j in ((x, y), (y, x)):
            p[i, j] = 0.5
            c[i, j] = 0.0
            pref[i, j] = 0.0
        del arcs[target]


def _directed_distances(
    trajectories: dict[int, Trajectory],
    poses: dict[int, Pose2],
    needed: set[tuple[int, int]],
    weave: WeaveParams,
) -> dict[tuple[int, int], float]:
    """Weaving distances d[(i, j)] evaluated in agent i's frame.

    The lateral gap in i's frame depends only on the trajectory difference,
    so each pair costs one projection of the difference onto i's lateral
    axis.
    """
    out: dict[tuple[int, int], float] = {}
    eps = weave.epsilon
    for i, j in needed:
        ti = trajectories[i].positions
        tj = trajectories[j].positions
        n = min(len(ti), len(tj), weave.horizon + 1)
        if n < 2:
            out[(i, j)] = WEAVE_SENTINEL
            continue
        th = poses[i].heading
        diff = ti[:n] - tj[:n]
        gap = -math.sin(th) * diff[:, 0] + math.cos(th) * diff[:, 1]
        num = np.minimum(np.abs(gap[:-1]), np.abs(gap[1:]))
        den = eps + np.maximum(0.0, -gap[:-1] * gap[1:])
        out[(i, j)] = float(np.min(num / den))
    return out
