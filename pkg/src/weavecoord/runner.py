"""File-emitting orchestration: training runs, resume, and the ablation grid.

A run directory holds the manifest, a per-iteration CSV log, the parameter
checkpoint and a full training state (replay buffer, generator state,
optimizer state) so an interrupted run can be resumed bit-exactly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunSettings
from .nets import ParamStore
from .sim.engine import Simulator
from .sim.metrics import EpisodeLog
from .training import (
    ABLATION_MODES,
    EpisodeRollout,
    ReplayBuffer,
    _AdamState,
    collect,
    effective_net_config,
    evaluate,
    train_iteration,
)

TRAIN_LOG_COLUMNS = (
    "iteration",
    "policy",
    "value",
    "topo",
    "edge",
    "node",
    "cons",
    "lead",
    "total",
    "grad_norm",
    "eval_cr",
    "eval_cr_aa",
    "eval_cr_am",
    "eval_as",
    "eval_sm",
)

_EP_FIELDS = [f.name for f in dataclasses.fields(EpisodeRollout) if f.name != "log"]
_LOG_FIELDS = [f.name for f in dataclasses.fields(EpisodeLog)]


@dataclass
class TrainResult:
    checkpoint: Path
    log_path: Path
    state_path: Path
    iterations_done: int
    store: ParamStore


def _rng_for(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag])


def _save_state(path: Path, store, buffer, rng, adam, iteration) -> None:
    payload: dict[str, np.ndarray] = {}
    for name, arr in store.arrays.items():
        payload[f"param::{name}"] = arr
    for k, ep in enumerate(buffer.episodes):
        for fname in _EP_FIELDS:
            payload[f"ep{k}::{fname}"] = getattr(ep, fname)
        for fname in _LOG_FIELDS:
            v = getattr(ep.log, fname)
            if v is not None:
                payload[f"ep{k}::log_{fname}"] = v
    for name, arr in adam.m.items():
        payload[f"adam_m::{name}"] = arr
    for name, arr in adam.v.items():
        payload[f"adam_v::{name}"] = arr
    meta = {
        "iteration": iteration,
        "n_episodes": len(buffer.episodes),
        "rng_state": rng.bit_generator.state,
        "adam_t": adam.t,
        "capacity": buffer.capacity,
    }
    payload["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **payload)


def _load_state(path: Path, cfg):
    data = np.load(path, allow_pickle=False)
    meta = json.loads(bytes(data["meta"]).decode("utf-8"))
    arrays = {}
    for key in data.files:
        if key.startswith("param::"):
            arrays[key.split("::", 1)[1]] = data[key]
    store = ParamStore(arrays, cfg)
    buffer = ReplayBuffer(meta["capacity"])
    for k in range(meta["n_episodes"]):
        fields = {f: data[f"ep{k}::{f}"] for f in _EP_FIELDS}
        log_kw = {}
        for f in _LOG_FIELDS:
            key = f"ep{k}::log_{f}"
            log_kw[f] = data[key] if key in data.files else None
        fields["log"] = EpisodeLog(**log_kw)
        buffer.add(EpisodeRollout(**fields))
    adam = _AdamState()
    adam.t = meta["adam_t"]
    for key in data.files:
        if key.startswith("adam_m::"):
            adam.m[key.split("::", 1)[1]] = data[key]
        elif key.startswith("adam_v::"):
            adam.v[key.split("::", 1)[1]] = data[key]
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    return store, buffer, rng, adam, meta["iteration"]


def _format_row(values) -> str:
    cells = []
    for v in values:
        if v is None:
            cells.append("")
        elif isinstance(v, int):
            cells.append(str(v))
        else:
            cells.append(repr(float(v)))
    return ",".join(cells) + "\n"


def run_training(settings: RunSettings, out_dir: str | Path, resume: bool = False) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tcfg = settings.train
    net_cfg = effective_net_config(settings.net, tcfg.ablation)
    scenario = settings.build_scenario()
    sim = Simulator(scenario)

    ckpt_path = out_dir / "checkpoint.wvc"
    log_path = out_dir / "train_log.csv"
    state_path = out_dir / "train_state.npz"

    if resume:
        if not state_path.exists():
            raise FileNotFoundError(f"nothing to resume at {state_path}")
        store, buffer, rng, adam, start_iter = _load_state(state_path, net_cfg)
        log_lines = log_path.read_text().splitlines(keepends=True) if log_path.exists() else []
    else:
        store = ParamStore.init(net_cfg, _rng_for(tcfg.seed, 0xA1))
        buffer = ReplayBuffer(tcfg.replay_capacity)
        rng = _rng_for(tcfg.seed, 0xC0)
        adam = _AdamState()
        start_iter = 0
        log_lines = [",".join(TRAIN_LOG_COLUMNS) + "\n"]

    for it in range(start_iter, tcfg.iterations):
        for ep in collect(
            sim,
            store,
            net_cfg,
            settings.weave,
            settings.field_params,
            settings.reward,
            tcfg.steps_per_iter,
            rng,
            tcfg.ablation,
        ):
            buffer.add(ep)
        stats = train_iteration(buffer, store, settings.loss, tcfg, rng, adam)
        row = [
            it,
            stats.get("policy"),
            stats.get("value"),
            stats.get("topo"),
            stats.get("edge"),
            stats.get("node"),
            stats.get("cons"),
            stats.get("lead"),
            stats.get("total"),
            stats.get("grad_norm"),
        ]
        if tcfg.eval_every > 0 and (it + 1) % tcfg.eval_every == 0:
            metrics, _ = evaluate(
                store,
                scenario,
                tcfg.eval_episodes,
                seed=tcfg.seed * 100003 + it,
                ablation=tcfg.ablation,
            )
            row += [metrics["CR"], metrics["CR_AA"], metrics["CR_AM"], metrics["AS"], metrics["SM"]]
        else:
            row += [None] * 5
        log_lines.append(_format_row(row))

    log_path.write_text("".join(log_lines))
    store.save(ckpt_path)
    _save_state(state_path, store, buffer, rng, adam, tcfg.iterations)
    return TrainResult(
        checkpoint=ckpt_path,
        log_path=log_path,
        state_path=state_path,
        iterations_done=tcfg.iterations,
        store=store,
    )


def run_ablation(
    settings: RunSettings,
    out_dir: str | Path,
    seeds: list[int] | None = None,
    modes: tuple[str, ...] = ABLATION_MODES,
) -> list[dict]:
    """Train and evaluate every ablation mode under paired seeds and equal
    budgets; returns one comparison row per (mode, seed)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if seeds is None:
        seeds = [settings.train.seed + k for k in range(5)]
    rows = []
    for mode in modes:
        for seed in seeds:
            sub = dataclasses.replace(settings)
            sub.train = dataclasses.replace(settings.train, ablation=mode, seed=seed)
            run_dir = out_dir / f"{mode}_seed{seed}"
            result = run_training(sub, run_dir)
            metrics, _ = evaluate(
                result.store,
                sub.build_scenario(),
                sub.train.eval_episodes,
                seed=seed * 7919 + 13,
                ablation=mode,
            )
            rows.append({"mode": mode, "seed": seed, **metrics})
    _write_ablation_table(out_dir, rows)
    return rows


def _write_ablation_table(out_dir: Path, rows: list[dict]) -> None:
    keys = ["mode", "seed", "CR", "CR_AA", "CR_AM", "AS", "SM", "SM_LO", "SM_LA"]
    lines = [",".join(keys) + "\n"]
    for row in rows:
        cells = [str(row["mode"]), str(row["seed"])] + [repr(float(row[k])) for k in keys[2:]]
        lines.append(",".join(cells) + "\n")
    (out_dir / "ablation.csv").write_text("".join(lines))
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
