"""Operator entry point: labeling, training, evaluation, verification,
ablations and figure rendering, each as a reproducible command.

Exit codes: 0 success, 1 verification or input-validation failure, 2 usage
error (bad flags, unknown config keys, missing files).  Every command
writes a run manifest into its output directory before doing anything
else.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunSettings, load_run_config, settings_snapshot
from .data_io import (
    MalformedInputError,
    read_trajectory_csv,
    write_episode_csv,
    write_jsonl,
    write_label_files,
    write_metrics_json,
)
from .nets import ParamStore
from .priority_graph import build_labels
from .runner import run_ablation, run_training
from .tabular import run_lemma1_suite, run_lemma2_suite
from .training import ABLATION_MODES, evaluate
from .weaving import Pose2, Trajectory

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2

OUT_ROOT_ENV = "WEAVECOORD_OUT_ROOT"


class UsageError(Exception):
    pass


class ValidationFailure(Exception):
    pass


def _now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _resolve_out_dir(arg: str | None, command: str) -> Path:
    if arg:
        out = Path(arg)
    else:
        root = Path(os.environ.get(OUT_ROOT_ENV, "weavecoord_runs"))
        out = root / command
    out.mkdir(parents=True, exist_ok=True)
    return out


class Manifest:
    """Written before side effects, finalized with artifact paths."""

    def __init__(self, out_dir: Path, command: str, args: argparse.Namespace, config: dict | None):
        self.path = out_dir / "manifest.json"
        self.data = {
            "command": command,
            "argv": [a for a in sys.argv[1:]],
            "seed": getattr(args, "seed", None),
            "config": config,
            "out_dir": str(out_dir),
            "package_version": __version__,
            "started_utc": _now(),
            "finished_utc": None,
            "artifacts": [],
        }
        self.write()

    def write(self) -> None:
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def finish(self, artifacts: list[Path]) -> None:
        self.data["finished_utc"] = _now()
        self.data["artifacts"] = sorted(str(p) for p in artifacts)
        self.write()


def _load_settings(args) -> RunSettings:
    if getattr(args, "config", None):
        settings = load_run_config(args.config)
    else:
        settings = RunSettings()
    if getattr(args, "seed", None) is not None:
        settings.seed = args.seed
        settings.train.seed = args.seed
    if getattr(args, "ablation", None):
        settings.train.ablation = args.ablation
    return settings


# ---------------------------------------------------------------------------
# commands


def cmd_label(args) -> int:
    settings = _load_settings(args)
    out_dir = _resolve_out_dir(args.out_dir, "label")
    manifest = Manifest(out_dir, "label", args, settings_snapshot(settings))
    traj = read_trajectory_csv(args.trajectories)
    weave = settings.weave
    fieldp = settings.field_params
    positions, headings = traj.positions, traj.headings
    n_rows = positions.shape[0]
    if n_rows < 2:
        raise ValidationFailure(f"{args.trajectories}: need at least 2 timesteps to label")
    graphs = []
    index = {aid: k for k, aid in enumerate(traj.agent_ids)}
    for k in range(n_rows - 1):  # the final row has no future to weave with
        upper = min(k + weave.horizon + 1, n_rows)
        trajs = {aid: Trajectory(positions[k:upper, index[aid]]) for aid in traj.agent_ids}
        poses = {
            aid: Pose2(
                positions[k, index[aid], 0], positions[k, index[aid], 1], headings[k, index[aid]]
            )
            for aid in traj.agent_ids
        }
        graphs.append((int(traj.t[k]), build_labels(trajs, poses, weave, fieldp)))
    paths = write_label_files(out_dir, graphs)
    manifest.finish(list(paths.values()))
    print(f"labeled {len(graphs)} steps for {len(traj.agent_ids)} agents -> {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    settings = _load_settings(args)
    out_dir = _resolve_out_dir(args.out_dir or settings.out_dir, "train")
    manifest = Manifest(out_dir, "train", args, settings_snapshot(settings))
    result = run_training(settings, out_dir, resume=args.resume)
    manifest.finish([result.checkpoint, result.log_path, result.state_path])
    print(f"trained {result.iterations_done} iterations -> {result.checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    settings = _load_settings(args)
    if args.scenario:
        if args.scenario.endswith(".toml"):
            settings.scenario.path = args.scenario
        else:
            settings.scenario.name = args.scenario
            settings.scenario.path = None
    out_dir = _resolve_out_dir(args.out_dir, "eval")
    manifest = Manifest(out_dir, "eval", args, settings_snapshot(settings))
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    try:
        store = ParamStore.load(ckpt)
        store.validate_shapes()
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    scenario = settings.build_scenario()
    seed = args.seed if args.seed is not None else settings.seed
    metrics, logs = evaluate(
        store, scenario, args.episodes, seed=seed, ablation=settings.train.ablation
    )
    artifacts = []
    for k, log in enumerate(logs):
        p = out_dir / f"episode_{k:03d}.csv"
        write_episode_csv(p, log)
        artifacts.append(p)
    metrics_path = out_dir / "metrics.json"
    write_metrics_json(metrics_path, metrics)
    artifacts.append(metrics_path)
    manifest.finish(artifacts)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_verify_lemmas(args) -> int:
    out_dir = _resolve_out_dir(args.out_dir, "verify-lemmas")
    manifest = Manifest(out_dir, "verify-lemmas", args, None)
    gammas = tuple(float(g) for g in args.gammas.split(","))
    seed = args.seed if args.seed is not None else 0
    records = run_lemma1_suite(
        n_instances=args.instances, gammas=gammas, seed=seed, rhs_scale=args.rhs_scale
    )
    records += run_lemma2_suite(n_instances=2 * args.instances, gammas=gammas, seed=seed)
    report_path = out_dir / "lemma_report.jsonl"
    write_jsonl(report_path, records)
    manifest.finish([report_path])
    bad = [r for r in records if not r["holds"]]
    n1 = sum(1 for r in records if r["lemma"] == 1)
    n2 = len(records) - n1
    print(f"value-gap bound: {n1} checks, identity: {n2} checks, violations: {len(bad)}")
    if bad:
        for r in bad[:10]:
            print(f"  violated: lemma {r['lemma']} seed {r['seed']} gamma {r['gamma']}")
        raise ValidationFailure(f"{len(bad)} verification records failed")
    return EXIT_OK


def cmd_ablate(args) -> int:
    settings = _load_settings(args)
    out_dir = _resolve_out_dir(args.out_dir or settings.out_dir, "ablate")
    manifest = Manifest(out_dir, "ablate", args, settings_snapshot(settings))
    seeds = [settings.seed + k for k in range(args.n_seeds)]
    rows = run_ablation(settings, out_dir, seeds=seeds)
    manifest.finish([out_dir / "ablation.csv", out_dir / "ablation.json"])
    by_mode: dict[str, list[float]] = {}
    for row in rows:
        by_mode.setdefault(row["mode"], []).append(row["CR_AA"])
    for mode, vals in by_mode.items():
        print(f"{mode}: mean CR_AA {float(np.mean(vals)):.4f} over {len(vals)} seeds")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_run_dir

    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise UsageError(f"run directory not found: {run_dir}")
    manifest = Manifest(run_dir, "report", args, None)
    scenario = None
    manifest_path = run_dir / "manifest.json"
    try:
        prior = json.loads(manifest_path.read_text())
        scen = (prior.get("config") or {}).get("scenario") or {}
        if scen:
            settings = RunSettings()
            settings.scenario.name = scen.get("name", "merge")
            settings.scenario.path = scen.get("path")
            settings.scenario.overrides = {
                k: v for k, v in scen.items() if k not in ("name", "path") and v is not None
            }
            scenario = settings.build_scenario()
    except (OSError, ValueError, KeyError):
        scenario = None
    written = render_run_dir(run_dir, scenario)
    manifest.finish(written)
    for p in written:
        print(f"wrote {p}")
    if not written:
        print("no renderable artifacts found")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="weavecoord",
        description="Weaving-derived priority graphs, microsimulation, "
        "leader-conditioned training and exact tabular verification.",
    )
    parser.add_argument("--version", action="version", version=f"weavecoord {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="run configuration TOML")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out-dir", default=None, help=f"output directory (default ${OUT_ROOT_ENV})")
        p.add_argument(
            "--single-thread",
            action="store_true",
            help="force fully deterministic single-threaded execution (always on)",
        )

    p = sub.add_parser("label", help="priority labels from a trajectory CSV")
    common(p)
    p.add_argument("--trajectories", required=True, help="CSV with agent_id,t,x,y,heading rows")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="run a training session")
    common(p, config_required=True)
    p.add_argument("--ablation", choices=ABLATION_MODES, default=None)
    p.add_argument("--resume", action="store_true", help="continue from the saved train state")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint deterministically")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scenario", default=None, help="builtin name or scenario TOML path")
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--ablation", choices=ABLATION_MODES, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify-lemmas", help="run the exact tabular verification suites")
    common(p)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--gammas", default="0.5,0.9,0.99")
    p.add_argument("--rhs-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify_lemmas)

    p = sub.add_parser("ablate", help="train and compare every ablation variant")
    common(p, config_required=True)
    p.add_argument("--n-seeds", type=int, default=5)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render figures from emitted CSV/JSON artifacts")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, UsageError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MalformedInputError, ValidationFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
