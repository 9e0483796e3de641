"""Render figures from emitted CSV/JSON artifacts to image files.

Everything here is a pure post-processing step over the delimited outputs;
nothing in the simulation or training path depends on it.  The Agg backend
keeps rendering headless and file-only.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data_io import read_episode_csv
from .sim.scenario import Scenario

LOSS_CURVES = ("policy", "value", "topo", "lead", "total")


def _read_csv_columns(path: Path) -> dict[str, list[str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        cols = {h: [] for h in header}
        for row in reader:
            for h, v in zip(header, row):
                cols[h].append(v)
    return cols


def render_training_curves(log_csv: str | Path, out_png: str | Path) -> Path:
    cols = _read_csv_columns(Path(log_csv))
    iters = np.array([int(v) for v in cols["iteration"]])
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for name in LOSS_CURVES:
        vals = np.array([float(v) if v else np.nan for v in cols[name]])
        axes[0].plot(iters, vals, label=name, linewidth=1.2)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("loss")
    axes[0].set_yscale("symlog")
    axes[0].legend(fontsize=8)
    axes[0].set_title("training losses")

    has_eval = any(v for v in cols.get("eval_cr", []))
    if has_eval:
        for name, label in (("eval_cr", "CR"), ("eval_cr_aa", "CR_AA"), ("eval_as", "AS")):
            pts = [(i, float(v)) for i, v in zip(iters, cols[name]) if v]
            if pts:
                xs, ys = zip(*pts)
                axes[1].plot(xs, ys, marker="o", markersize=3, label=label)
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("percent")
        axes[1].legend(fontsize=8)
        axes[1].set_title("scheduled evaluations")
    else:
        grad = np.array([float(v) if v else np.nan for v in cols["grad_norm"]])
        axes[1].plot(iters, grad, color="tab:gray", linewidth=1.0)
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("grad norm (pre-clip)")
        axes[1].set_title("gradient norm")
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def _draw_lanes(ax, scenario: Scenario) -> None:
    for lane in scenario.lanes.values():
        pts = lane.centerline
        seg = np.diff(pts, axis=0)
        length = np.hypot(seg[:, 0], seg[:, 1])[:, None]
        normal = np.column_stack([-seg[:, 1], seg[:, 0]]) / length
        normal = np.vstack([normal, normal[-1]])
        half = lane.width / 2.0
        ax.plot(pts[:, 0], pts[:, 1], color="0.8", linewidth=0.8, linestyle="--")
        for sign in (1.0, -1.0):
            edge = pts + sign * half * normal
            ax.plot(edge[:, 0], edge[:, 1], color="0.6", linewidth=0.8)


def render_episode(
    episode_csv: str | Path, out_png: str | Path, scenario: Scenario | None = None
) -> Path:
    log = read_episode_csv(Path(episode_csv))
    fig, ax = plt.subplots(figsize=(7, 6))
    if scenario is not None:
        _draw_lanes(ax, scenario)
    cmap = plt.get_cmap("tab10")
    for i in range(log.n_agents):
        ax.plot(log.x[:, i], log.y[:, i], color=cmap(i % 10), linewidth=1.0, label=f"agent {i}")
        hit = log.coll_aa[:, i] | log.coll_am[:, i]
        if np.any(hit):
            ax.scatter(log.x[hit, i], log.y[hit, i], color="black", s=12, zorder=5)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend(fontsize=7, loc="best")
    ax.set_title(Path(episode_csv).stem)
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def render_metrics(metrics_json: str | Path, out_png: str | Path) -> Path:
    metrics = json.loads(Path(metrics_json).read_text())
    keys = [k for k in ("CR", "CR_AA", "CR_AM", "AS", "SM", "SM_LO", "SM_LA") if k in metrics]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(keys, [metrics[k] for k in keys], color="tab:blue")
    ax.set_ylabel("percent")
    ax.set_title("evaluation metrics")
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def render_ablation(ablation_csv: str | Path, out_png: str | Path) -> Path:
    cols = _read_csv_columns(Path(ablation_csv))
    modes = sorted(set(cols["mode"]))
    fig, ax = plt.subplots(figsize=(6.5, 4))
    means = []
    for mode in modes:
        vals = [float(v) for m, v in zip(cols["mode"], cols["CR_AA"]) if m == mode]
        means.append(np.mean(vals))
        ax.scatter([mode] * len(vals), vals, color="tab:gray", s=14, zorder=3)
    ax.bar(modes, means, color="tab:orange", alpha=0.6, zorder=2)
    ax.set_ylabel("CR_AA [%]")
    ax.set_title("agent-agent collision rate by variant (dots: seeds)")
    fig.tight_layout()
    out = Path(out_png)
    fig.savefig(out, dpi=150)
    plt.close(fig)
    return out


def render_run_dir(run_dir: str | Path, scenario: Scenario | None = None) -> list[Path]:
    """Render every known artifact in a run directory; returns written files."""
    run_dir = Path(run_dir)
    written = []
    log_csv = run_dir / "train_log.csv"
    if log_csv.exists():
        written.append(render_training_curves(log_csv, run_dir / "train_log.png"))
    metrics_json = run_dir / "metrics.json"
    if metrics_json.exists():
        written.append(render_metrics(metrics_json, run_dir / "metrics.png"))
    ablation_csv = run_dir / "ablation.csv"
    if ablation_csv.exists():
        written.append(render_ablation(ablation_csv, run_dir / "ablation.png"))
    for ep_csv in sorted(run_dir.glob("episode_*.csv")):
        written.append(render_episode(ep_csv, ep_csv.with_suffix(".png"), scenario))
    return written
