"""Delimited-file surfaces: trajectory ingestion, labels, episode logs.

Floats are written with repr so identical runs produce byte-identical
files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .priority_graph import PriorityGraph
from .sim.metrics import EpisodeLog

TRAJECTORY_COLUMNS = ("agent_id", "t", "x", "y", "heading")
EPISODE_COLUMNS = ("t", "agent", "x", "y", "heading", "speed", "lon", "steer", "coll_aa", "coll_am")


class MalformedInputError(ValueError):
    """Unusable input file; the message carries a line diagnostic."""


@dataclass
class TrajectoryLog:
    """Rectangular per-agent trajectory table: every agent covers the same
    contiguous step range."""

    agent_ids: list[int]
    t: np.ndarray  # (T,)
    positions: np.ndarray  # (T, N, 2)
    headings: np.ndarray  # (T, N)


def read_trajectory_csv(path: str | Path) -> TrajectoryLog:
    rows: dict[int, list[tuple[int, float, float, float]]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != TRAJECTORY_COLUMNS:
            raise MalformedInputError(
                f"{path}: expected header {','.join(TRAJECTORY_COLUMNS)}"
            )
        for ln, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise MalformedInputError(f"{path}:{ln}: expected 5 fields, got {len(row)}")
            try:
                aid = int(row[0])
                t = int(row[1])
                x, y, heading = (float(v) for v in row[2:5])
            except ValueError as exc:
                raise MalformedInputError(f"{path}:{ln}: {exc}") from None
            if not all(np.isfinite(v) for v in (x, y, heading)):
                raise MalformedInputError(f"{path}:{ln}: non-finite coordinate")
            rows.setdefault(aid, []).append((t, x, y, heading))
    if not rows:
        raise MalformedInputError(f"{path}: no trajectory rows")
    agent_ids = sorted(rows)
    steps = None
    for aid in agent_ids:
        rows[aid].sort()
        ts = [r[0] for r in rows[aid]]
        if ts != list(range(ts[0], ts[0] + len(ts))):
            raise MalformedInputError(f"{path}: agent {aid} has gaps in its step sequence")
        if steps is None:
            steps = ts
        elif ts != steps:
            raise MalformedInputError(f"{path}: agents cover different step ranges")
    t_arr = np.array(steps)
    n = len(agent_ids)
    positions = np.zeros((len(steps), n, 2))
    headings = np.zeros((len(steps), n))
    for k, aid in enumerate(agent_ids):
        data = np.array(rows[aid], dtype=float)
        positions[:, k, 0] = data[:, 1]
        positions[:, k, 1] = data[:, 2]
        headings[:, k] = data[:, 3]
    return TrajectoryLog(agent_ids=agent_ids, t=t_arr, positions=positions, headings=headings)


def write_label_files(out_dir: str | Path, graphs: list[tuple[int, PriorityGraph]]) -> dict[str, Path]:
    """Edge and node label tables plus a JSON summary for a graph sequence."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    edges_path = out_dir / "labels_edges.csv"
    nodes_path = out_dir / "labels_nodes.csv"
    summary_path = out_dir / "labels_summary.json"
    n_edges = 0
    with open(edges_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "i", "j", "p", "c", "A"))
        for t, g in graphs:
            for e in g.edges:
                w.writerow((t, e.dst, e.src, repr(e.p), repr(e.confidence), repr(e.preference)))
                n_edges += 1
    with open(nodes_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("t", "i", "s"))
        for t, g in graphs:
            for nid in g.node_ids:
                w.writerow((t, nid, repr(g.scores[nid])))
    summary = {
        "n_steps": len(graphs),
        "n_edge_records": n_edges,
        "n_agents": len(graphs[0][1].node_ids) if graphs else 0,
        "files": {"edges": edges_path.name, "nodes": nodes_path.name},
    }
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")
    return {"edges": edges_path, "nodes": nodes_path, "summary": summary_path}


def write_episode_csv(path: str | Path, log: EpisodeLog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(EPISODE_COLUMNS)
        for k, t in enumerate(log.t):
            for i in range(log.n_agents):
                w.writerow(
                    (
                        int(t),
                        i,
                        repr(float(log.x[k, i])),
                        repr(float(log.y[k, i])),
                        repr(float(log.heading[k, i])),
                        repr(float(log.speed[k, i])),
                        repr(float(log.lon[k, i])),
                        repr(float(log.steer[k, i])),
                        int(log.coll_aa[k, i]),
                        int(log.coll_am[k, i]),
                    )
                )


def read_episode_csv(path: str | Path) -> EpisodeLog:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != EPISODE_COLUMNS:
            raise MalformedInputError(f"{path}: expected header {','.join(EPISODE_COLUMNS)}")
        rows = [r for r in reader if r]
    if not rows:
        raise MalformedInputError(f"{path}: empty episode log")
    data = np.array([[float(v) for v in r] for r in rows])
    ts = np.unique(data[:, 0]).astype(int)
    agents = np.unique(data[:, 1]).astype(int)
    t_steps, n = len(ts), len(agents)
    if len(rows) != t_steps * n:
        raise MalformedInputError(f"{path}: ragged episode table")
    order = np.lexsort((data[:, 1], data[:, 0]))
    data = data[order]
    grid = data.reshape(t_steps, n, -1)
    return EpisodeLog(
        t=ts,
        x=grid[:, :, 2],
        y=grid[:, :, 3],
        heading=grid[:, :, 4],
        speed=grid[:, :, 5],
        lon=grid[:, :, 6],
        steer=grid[:, :, 7],
        coll_aa=grid[:, :, 8] > 0.5,
        coll_am=grid[:, :, 9] > 0.5,
    )


def write_metrics_json(path: str | Path, metrics: dict[str, float]) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def write_jsonl(path: str | Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
