"""Command-line entry points: simulate, smooth, experiment, metrics."""
from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, GrandParisError
from .harness import (
    _DATA,
    build_model,
    compute_metrics,
    em_functional,
    emit_results,
    format_float,
    load_config,
    run_experiment,
    simulate_dataset,
)
from .rng import RngStream
from .smoothing import fixed_lag_smooth, smooth_additive

__all__ = ["main"]


def _default_threads() -> int:
    return int(os.environ.get("GRANDPARIS_THREADS", "1"))


def _apply_overrides(config, args):
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "datasets", None) is not None:
        updates["datasets"] = args.datasets
    return replace(config, **updates) if updates else config


def _cmd_simulate(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    times, states, observations = simulate_dataset(
        config, RngStream(config.seed).derive(_DATA, 0).generator()
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        fh.write("t,x,y\n")
        for t, x, y in zip(times, states, observations):
            fh.write(f"{format_float(t)},{format_float(x)},{format_float(y)}\n")
    print(f"wrote {len(times)} rows to {out}")
    return 0


def _read_observations(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "y" not in reader.fieldnames:
            raise ConfigError(f"{path}: expected a CSV with a 'y' column")
        return np.asarray([float(row["y"]) for row in reader])


def _cmd_smooth(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    observations = _read_observations(args.data)
    model, obs_model = build_model(config)
    functional = em_functional(
        model, obs_model, observations, config.density_draws, delta=config.delta
    )
    common = dict(
        n_particles=config.n_particles,
        delta=config.delta,
        density_draws=config.density_draws,
        adjustment=config.adjustment,
        rng=RngStream(config.seed),
        x0=config.x0,
    )
    if args.method == "fixed_lag":
        if args.lag is None:
            raise ConfigError("--lag is required for method fixed_lag")
        result = fixed_lag_smooth(
            model, obs_model, observations, functional, lag=args.lag, **common
        )
    else:
        result = smooth_additive(
            model,
            obs_model,
            observations,
            functional,
            n_backward=config.n_backward,
            bound_strategy=config.bound_strategy,
            **common,
        )
    print(f"Q_hat {format_float(result.estimate)}")
    return 0


def _cmd_experiment(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    out_dir = args.out_dir if args.out_dir is not None else config.output_dir
    results, metrics = run_experiment(config, threads=args.threads, out_dir=out_dir)
    print(f"wrote {config.datasets} dataset dir(s) under {out_dir}")
    print(f"{len(results)} replicate rows, {len(metrics)} metrics rows")
    return 0


def _cmd_metrics(args) -> int:
    groups: dict = {}
    with open(args.results, newline="") as fh:
        for row in csv.DictReader(fh):
            lag = int(row["lag"]) if row["lag"] else None
            groups.setdefault((row["method"], lag), []).append(float(row["Q_hat"]))
    rows = [
        compute_metrics(estimates, args.q_star, method=method, lag=lag)
        for (method, lag), estimates in sorted(
            groups.items(), key=lambda kv: (kv[0][0], -1 if kv[0][1] is None else kv[0][1])
        )
    ]
    if args.out is not None:
        emit_results([], rows, {"metrics": args.out})
        print(f"wrote {len(rows)} metrics rows to {args.out}")
    else:
        print("method,lag,arb,acv,mean_Q,sd_Q,Q_star")
        for m in rows:
            lag = "" if m.lag is None else str(m.lag)
            print(
                f"{m.method},{lag},{format_float(m.arb)},{format_float(m.acv)},"
                f"{format_float(m.mean_q)},{format_float(m.sd_q)},{format_float(m.q_star)}"
            )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grandparis",
        description="Online particle smoothing for partially observed SDEs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a dataset and write a t,x,y CSV")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("smooth", help="one smoothed estimate from a dataset CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="CSV with a 'y' column")
    p.add_argument(
        "--method", choices=("grand_paris", "fixed_lag"), default="grand_paris"
    )
    p.add_argument("--lag", type=int, default=None, help="lag for method fixed_lag")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=_cmd_smooth)

    p = sub.add_parser("experiment", help="full replicated protocol with CSV outputs")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default=None, help="defaults to output_dir from the config")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument(
        "--threads",
        type=int,
        default=_default_threads(),
        help="worker processes (default from GRANDPARIS_THREADS, else 1)",
    )
    p.add_argument("--datasets", type=int, default=None, help="override dataset count")
    p.set_defaults(fn=_cmd_experiment)

    p = sub.add_parser("metrics", help="recompute metrics from a results CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--q-star", type=float, required=True, help="reference value")
    p.add_argument("--out", default=None, help="metrics CSV path (default: print)")
    p.set_defaults(fn=_cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (GrandParisError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
