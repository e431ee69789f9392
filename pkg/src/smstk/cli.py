"""Command-line entry point: smsctl plan | track | run | verify."""
from __future__ import annotations

import argparse
import concurrent.futures
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, SmsError
from .scenario import run_scenario, verify_run


def _apply_overrides(config, args):
    if args.seed is not None:
        config.seed = args.seed
        config.planner.seed = args.seed
        config.echo["seed"] = args.seed
    if args.dt_plan is not None:
        config.planner.dt_plan = args.dt_plan
        config.echo["planner"]["dt_plan"] = args.dt_plan
    if args.dt_ctrl is not None:
        config.gains.dt_ctrl = args.dt_ctrl
        config.echo["controller"]["dt_ctrl"] = args.dt_ctrl
    return config


def _run_one(cfg_path: str, out_root: str, plan_only: bool, args) -> int:
    try:
        config = _apply_overrides(load_config(cfg_path), args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 4
    out = Path(out_root) / config.label if args.sweep else Path(out_root)
    try:
        result = run_scenario(config, out, plan_only=plan_only)
    except SmsError as exc:
        print(f"{config.label}: {exc}", file=sys.stderr)
        return 1
    status = result.manifest.get("status")
    print(f"{config.label}: {status} "
          f"(final error {result.manifest.get('tracking', result.manifest.get('plan', {})).get('final_error_m', float('nan')):.4g} m)"
          if status in ("ok", "failed", "planned") else f"{config.label}: {status}")
    return result.status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="smsctl",
        description="Plan, track and verify free-floating manipulator scenarios.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, multi=False):
        p.add_argument("config", nargs="+" if multi else 1,
                       help="scenario TOML file(s)")
        p.add_argument("--out", default="runs", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--dt-plan", type=float, default=None, dest="dt_plan")
        p.add_argument("--dt-ctrl", type=float, default=None, dest="dt_ctrl")
        p.add_argument("--sweep", action="store_true",
                       help="run each config in its own subdirectory")
        p.add_argument("--workers", type=int, default=1,
                       help="parallel scenario workers with --sweep")

    p_plan = sub.add_parser("plan", help="generate the optimal trajectory only")
    add_common(p_plan, multi=True)
    p_track = sub.add_parser("track", help="plan and run closed-loop tracking")
    add_common(p_track, multi=True)
    p_run = sub.add_parser("run", help="plan, track and verify (full pipeline)")
    add_common(p_run, multi=True)

    p_verify = sub.add_parser("verify", help="recompute manifest numbers from CSVs")
    p_verify.add_argument("run_dir", help="directory written by a previous run")

    args = parser.parse_args(argv)

    if args.command == "verify":
        ok, problems = verify_run(args.run_dir)
        for p in problems:
            print(p)
        print("verify: OK" if ok else "verify: FAILED")
        return 0 if ok else 1

    plan_only = args.command == "plan"
    configs = args.config
    if len(configs) > 1 and not args.sweep:
        args.sweep = True
    if args.sweep and args.workers > 1 and len(configs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.workers) as ex:
            codes = list(ex.map(_run_one, configs, [args.out] * len(configs),
                                [plan_only] * len(configs), [args] * len(configs)))
        return max(codes)
    codes = [_run_one(c, args.out, plan_only, args) for c in configs]
    return max(codes)


if __name__ == "__main__":
    sys.exit(main())
