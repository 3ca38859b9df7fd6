"""Operator command line.

Subcommands: `simulate` writes a trajectory log, `train` fits the agent
on a log, `eval` scores a policy snapshot with the importance-sampling
estimator, `suite` runs the ablation variants, `sweep-k` varies the group
count, and `stability` turns metrics CSVs into allocation-ratio amplitude
statistics. Every run directory receives the exact resolved configuration
before any work starts.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric fault.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import feedsim, ope, trainer
from .dataset import build_arrays, read_log, split_by_trajectory
from .errors import AllocError, ConfigError, DataError, NumericFault
from .feedsim import SimConfig
from .trainer import AblationFlags, TrainConfig, VARIANTS


# ---------------------------------------------------------------------------
# Run configuration: config file + dotted CLI overrides
# ---------------------------------------------------------------------------

DEFAULT_OPE = {"cap": 10.0, "gamma": 0.9}


@dataclasses.dataclass
class RunConfig:
    sim: SimConfig
    train: TrainConfig
    ope: dict

    def to_dict(self) -> dict:
        return {"sim": self.sim.to_dict(), "train": self.train.to_dict(), "ope": dict(self.ope)}


def _apply_override(tree: dict, dotted: str) -> None:
    if "=" not in dotted:
        raise ConfigError(f"override {dotted!r} must look like section.key=value")
    key, raw = dotted.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = tree
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def load_run_config(config_path: str | None, overrides: list[str]) -> RunConfig:
    tree: dict = {}
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise DataError(f"config file not found: {p}")
        tree = json.loads(p.read_text())
    for item in overrides or []:
        _apply_override(tree, item)
    try:
        sim = SimConfig.from_dict(tree.get("sim", {})) if tree.get("sim") else SimConfig()
        train_cfg = TrainConfig.from_dict(tree.get("train", {})) if tree.get("train") else TrainConfig()
    except TypeError as exc:
        raise ConfigError(f"bad configuration key: {exc}") from exc
    ope_cfg = {**DEFAULT_OPE, **tree.get("ope", {})}
    return RunConfig(sim=sim, train=train_cfg, ope=ope_cfg)


def _prepare_out(out: str, run_cfg: RunConfig) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps(run_cfg.to_dict(), indent=2, sort_keys=True))
    return out_dir


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    run_cfg = load_run_config(args.config, args.set)
    if args.seed is not None:
        run_cfg.sim.seed = args.seed
    out_dir = _prepare_out(args.out, run_cfg)
    out_file = out_dir / "log.ndjson"
    n = feedsim.generate_log(
        run_cfg.sim, args.behavior, num_users=args.users, max_steps=args.steps, out_path=out_file
    )
    print(f"wrote {n} transitions to {out_file}")
    return 0


def cmd_train(args) -> int:
    run_cfg = load_run_config(args.config, args.set)
    if args.seed is not None:
        run_cfg.train.seed = args.seed
    if args.ablation:
        run_cfg.train.ablation = AblationFlags.from_names(args.ablation)
    out_dir = _prepare_out(args.out, run_cfg)
    ds = read_log(args.data)
    train_ds, probe_ds = split_by_trajectory(ds, eval_fraction=args.probe_fraction, seed=run_cfg.train.seed)
    probe = build_arrays(probe_ds, run_cfg.train.encoder)
    result = trainer.train(train_ds, run_cfg.train, out_dir=out_dir, probe=probe)
    print(
        f"trained {result.steps_run} steps; collapsed={result.collapsed}; "
        f"metrics at {out_dir / 'metrics.csv'}, snapshot at {out_dir / 'snapshot.json'}"
    )
    return 0


def cmd_eval(args) -> int:
    run_cfg = load_run_config(args.config, args.set)
    snapshot_path = Path(args.snapshot)
    if not snapshot_path.exists():
        raise DataError(f"snapshot file not found: {snapshot_path}")
    policy, extra = trainer.load_policy(snapshot_path)
    ds = read_log(args.data)
    model_cfg = TrainConfig.from_dict(extra["model"])
    arrays = build_arrays(ds, model_cfg.encoder)
    cap = args.cap if args.cap is not None else run_cfg.ope["cap"]
    report = ope.ncis(arrays, policy, cap=cap, gamma=run_cfg.ope["gamma"])
    doc = report.to_dict()
    doc["snapshot_version"] = extra.get("version")
    if args.bootstrap:
        doc["bootstrap"] = ope.bootstrap_ncis(arrays, policy, cap=cap, gamma=run_cfg.ope["gamma"])
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(doc, indent=2))
    print(f"ncis cumulative={report.cumulative_estimate:.4f} ratio={report.ratio_estimate:.6f} -> {out_path}")
    return 0


def cmd_suite(args) -> int:
    run_cfg = load_run_config(args.config, args.set)
    out_dir = _prepare_out(args.out, run_cfg)
    variants = [v for v in args.variants.split(",") if v]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; known: {sorted(VARIANTS)}")
    seeds = [int(s) for s in args.seeds.split(",") if s]
    ds = read_log(args.data)
    train_ds, eval_ds = split_by_trajectory(ds, eval_fraction=args.eval_fraction, seed=run_cfg.train.seed)
    table = trainer.run_variant_suite(
        run_cfg.train, variants, seeds, train_ds, eval_ds, cap=run_cfg.ope["cap"], out_dir=out_dir
    )
    for agg in table["aggregates"]:
        print(f"{agg['variant']:>14}: mean={agg['mean']:.3f} std={agg['std']:.3f} (n={agg['n']})")
    return 0


def cmd_sweep_k(args) -> int:
    run_cfg = load_run_config(args.config, args.set)
    out_dir = _prepare_out(args.out, run_cfg)
    k_values = [int(k) for k in args.k_values.split(",") if k]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    ds = read_log(args.data)
    train_ds, eval_ds = split_by_trajectory(ds, eval_fraction=args.eval_fraction, seed=run_cfg.train.seed)
    rows = []
    for k in k_values:
        for seed in seeds:
            cfg = dataclasses.replace(run_cfg.train, k=k, seed=seed)
            if k == 1:
                cfg = dataclasses.replace(cfg, ablation=AblationFlags.from_names(["no_mg"]))
            result = trainer.train(build_arrays(train_ds, cfg.encoder), cfg)
            report = ope.ncis(
                build_arrays(eval_ds, cfg.encoder), result.model.policy(),
                cap=run_cfg.ope["cap"], gamma=cfg.gamma,
            )
            rows.append({"k": k, "seed": seed, "ncis_cumulative": report.cumulative_estimate})
    plot_data = []
    for k in k_values:
        vals = np.array([r["ncis_cumulative"] for r in rows if r["k"] == k])
        plot_data.append({"k": k, "mean": float(vals.mean()), "std": float(vals.std())})
    doc = {"rows": rows, "plot_data": plot_data}
    (out_dir / "sweep_k.json").write_text(json.dumps(doc, indent=2))
    with open(out_dir / "sweep_k_plot.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["k", "mean", "std"])
        writer.writeheader()
        writer.writerows(plot_data)
    for item in plot_data:
        print(f"K={item['k']}: mean={item['mean']:.3f} std={item['std']:.3f}")
    return 0


def sliding_amplitudes(series: np.ndarray, window: int) -> np.ndarray:
    """max - min over every full sliding window of the series."""
    series = np.asarray(series, dtype=np.float64)
    w = min(max(2, window), len(series))
    if len(series) < 2:
        return np.zeros(0)
    n_windows = len(series) - w + 1
    return np.array([series[i : i + w].max() - series[i : i + w].min() for i in range(n_windows)])


def cmd_stability(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = []
    for metrics_path in args.metrics:
        p = Path(metrics_path)
        if not p.exists():
            raise DataError(f"metrics file not found: {p}")
        with open(p) as fh:
            reader = csv.DictReader(fh)
            if "alloc_ratio" not in (reader.fieldnames or []):
                raise DataError(f"{p} has no alloc_ratio column")
            series = np.array([float(row["alloc_ratio"]) for row in reader])
        amps = sliding_amplitudes(series, args.window)
        counts, edges = np.histogram(amps, bins=args.hist_bins, range=(0.0, 1.0), density=True)
        runs.append(
            {
                "run": str(p),
                "window": args.window,
                "n_windows": int(len(amps)),
                "mean_amplitude": float(amps.mean()) if len(amps) else 0.0,
                "max_amplitude": float(amps.max()) if len(amps) else 0.0,
                "hist_bin_edges": [float(e) for e in edges],
                "hist_density": [float(c) for c in counts],
            }
        )
    doc = {"window": args.window, "runs": runs}
    (out_dir / "stability.json").write_text(json.dumps(doc, indent=2))
    for run in runs:
        print(f"{run['run']}: mean amplitude={run['mean_amplitude']:.4f} max={run['max_amplitude']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="livealloc", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file with sim/train/ope sections")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, e.g. sim.seed=7")

    p = sub.add_parser("simulate", help="generate a logged-trajectory file")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--users", type=int, default=400)
    p.add_argument("--steps", type=int, default=200, help="session length cap")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--behavior", default="group_heuristic", choices=sorted(feedsim.BEHAVIOR_POLICIES))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train the agent on a log")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablation", default="", help="comma-separated ablation flags, e.g. no_mg,no_dd")
    p.add_argument("--probe-fraction", type=float, default=0.1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a policy snapshot against a log")
    common(p)
    p.add_argument("--snapshot", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cap", type=float, default=None)
    p.add_argument("--bootstrap", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("suite", help="train and evaluate ablation variants")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default="full,no_qnorm")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--eval-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("sweep-k", help="vary the user-group count")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k-values", default="1,2,4,6,8")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--eval-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("stability", help="allocation-ratio amplitude statistics from metrics CSVs")
    p.add_argument("--metrics", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=1200)
    p.add_argument("--hist-bins", type=int, default=20)
    p.set_defaults(func=cmd_stability)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return 3
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, AllocError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
