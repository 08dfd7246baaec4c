"""Command-line interface.

Subcommands: grid build, plan local, plan cluster, run single|baseline|cluster|fleet,
sweep rho, emit. Exit codes: 0 ok, 2 scenario error, 3 value iteration did not
converge, 4 fleet simulation stalled.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import cluster_dp, covgrid, local_dp, reports, runners
from .errors import ConvergenceError, ScenarioError, StallError
from .scenario import load_scenario, resolved_config

EXIT_OK = 0
EXIT_SCENARIO = 2
EXIT_NONCONVERGED = 3
EXIT_STALL = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covplan",
        description="Belief-grid planning and fleet simulation for active "
                    "state estimation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for independent cluster solves")
        p.add_argument("--print-config", action="store_true",
                       help="print the fully resolved configuration and exit")

    grid = sub.add_parser("grid", help="covariance grid operations")
    grid_sub = grid.add_subparsers(dest="grid_command", required=True)
    grid_build = grid_sub.add_parser("build", help="assemble and save the grid")
    common(grid_build)
    grid_build.add_argument("--target", type=int, default=0)

    plan = sub.add_parser("plan", help="solve planning stages")
    plan_sub = plan.add_subparsers(dest="plan_command", required=True)
    plan_local = plan_sub.add_parser("local", help="solve one target's local DP")
    common(plan_local)
    plan_local.add_argument("--target", type=int, default=0)
    plan_cluster = plan_sub.add_parser("cluster", help="solve the cluster DP")
    common(plan_cluster)

    run = sub.add_parser("run", help="end-to-end runs")
    run_sub = run.add_subparsers(dest="run_command", required=True)
    for name in ("single", "cluster", "fleet"):
        p = run_sub.add_parser(name)
        common(p)
    baseline = run_sub.add_parser("baseline")
    common(baseline)
    baseline.add_argument("--policy", required=True,
                          choices=runners.BASELINE_NAMES)

    sweep = sub.add_parser("sweep", help="parameter sweeps")
    sweep_sub = sweep.add_subparsers(dest="sweep_command", required=True)
    sweep_rho = sweep_sub.add_parser("rho")
    common(sweep_rho)
    sweep_rho.add_argument("--values", type=float, nargs="+", default=None)

    emit = sub.add_parser("emit", help="render report series to CSV + figures")
    emit.add_argument("--kind", required=True, choices=reports.EMIT_KINDS)
    emit.add_argument("--source", required=True, help="report JSON or trace JSONL")
    emit.add_argument("--out", required=True, help="output directory")

    return parser


def _load(args):
    scenario = load_scenario(args.scenario)
    if args.seed is not None:
        scenario = replace(scenario, seed=args.seed)
    if getattr(args, "print_config", False):
        print(json.dumps(resolved_config(scenario), indent=1, sort_keys=True))
        return None
    return scenario


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _cleanup_on_failure(paths):
    for path in paths:
        try:
            Path(path).unlink()
        except OSError:
            pass


def cmd_grid_build(args) -> int:
    scenario = _load(args)
    if scenario is None:
        return EXIT_OK
    out = _out_dir(args)
    cache = runners.AssetCache()
    assets, grid, _unused = runners.prepare_target(scenario, args.target, cache)
    path = out / f"grid_target{args.target}.json"
    covgrid.save_grid(grid, path)
    print(f"grid: {len(grid)} members, tolerance {grid.tolerance:g} -> {path}")
    return EXIT_OK


def cmd_plan_local(args) -> int:
    scenario = _load(args)
    if scenario is None:
        return EXIT_OK
    out = _out_dir(args)
    cache = runners.AssetCache()
    assets, grid, policy = runners.prepare_target(scenario, args.target, cache)
    path = out / f"local_policy_target{args.target}.json"
    local_dp.save_policy(policy, path)
    print(f"local policy: {policy.n_states} states, "
          f"{len(policy.residuals)} sweeps -> {path}")
    return EXIT_OK


def cmd_plan_cluster(args) -> int:
    scenario = _load(args)
    if scenario is None:
        return EXIT_OK
    out = _out_dir(args)
    cache = runners.AssetCache()
    plan = runners.build_cluster_plan(scenario, tuple(range(scenario.n_targets)), cache)
    path = out / "cluster_policy.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(cluster_dp.policy_to_dict(plan.policy, cluster_id=0), fh, indent=1)
    print(f"cluster policy: {plan.policy.n_reachable} reachable states, "
          f"{len(plan.policy.tours)} tours -> {path}")
    return EXIT_OK


def cmd_run_single(args) -> int:
    scenario = _load(args)
    if scenario is None:
        return EXIT_OK
    out = _out_dir(args)
    report = runners.run_single_target(scenario)
    report_path = out / "report.json"
    report.save(report_path)
    produced = reports.emit_trajectory(report.to_dict(), out)
    print(f"reward {report.totals['reward']:.4f}, distance "
          f"{report.totals['distance']:.2f} -> {report_path}")
    for path in produced:
        print(f"  {path}")
    return EXIT_OK


def cmd_run_baseline(args) -> int:
    scenario = _load(args)
    if scenario is None:
        return EXIT_OK
    out = _out_dir(args)
    report = runners.run_baseline(scenario, args.policy)
    report_path = out / f"report_{args.policy}.json"
    report.save(report_path)
    print(f"{args.policy}: reward {report.totals['reward']:.4f} -> {report_path}")
    return EXIT_OK


def cmd_run_cluster(args) -> int:
    scenario = _load(args)
    if scenario is None:
        return EXIT_OK
    out = _out_dir(args)
    report = runners.run_cluster(scenario)
    report_path = out / "report.json"
    report.save(report_path)
    produced = reports.emit_error_vs_observations(report.to_dict(), out)
    print(f"tour reward {report.totals['tour_reward']:.4f}, "
          f"{report.totals['observations']} observations -> {report_path}")
    for path in produced:
        print(f"  {path}")
    return EXIT_OK


def cmd_run_fleet(args) -> int:
    scenario = _load(args)
    if scenario is None:
        return EXIT_OK
    out = _out_dir(args)
    report, trace = runners.run_fleet(scenario, threads=args.threads)
    written = []
    try:
        report_path = out / "report.json"
        report.save(report_path)
        written.append(report_path)
        trace_path = out / "trace.jsonl"
        runners.write_trace_jsonl(trace, trace_path)
        written.append(trace_path)
        summary_path = out / "summary.csv"
        runners.write_fleet_summary_csv(trace, summary_path)
        written.append(summary_path)
        records = trace.tick_records + trace.obs_records
        written += reports.emit_assignment_timeline(records, out)
        written += reports.emit_trajectory(records, out)
    except Exception:
        _cleanup_on_failure(written)
        raise
    print(f"{report.totals['ticks']} ticks, exclusive="
          f"{report.totals['exclusive']} -> {out}")
    for path in written:
        print(f"  {path}")
    return EXIT_OK


def cmd_sweep_rho(args) -> int:
    scenario = _load(args)
    if scenario is None:
        return EXIT_OK
    out = _out_dir(args)
    report = runners.sweep_rho(scenario, rho_values=args.values)
    report_path = out / "report.json"
    report.save(report_path)
    produced = reports.emit_rho_sweep(report.to_dict(), out)
    print(f"{report.totals['points']} sweep points -> {report_path}")
    for path in produced:
        print(f"  {path}")
    return EXIT_OK


def cmd_emit(args) -> int:
    produced = reports.emit(args.kind, args.source, args.out)
    for path in produced:
        print(f"  {path}")
    return EXIT_OK


def dispatch(args) -> int:
    if args.command == "grid":
        return cmd_grid_build(args)
    if args.command == "plan":
        return cmd_plan_local(args) if args.plan_command == "local" else cmd_plan_cluster(args)
    if args.command == "run":
        return {
            "single": cmd_run_single,
            "baseline": cmd_run_baseline,
            "cluster": cmd_run_cluster,
            "fleet": cmd_run_fleet,
        }[args.run_command](args)
    if args.command == "sweep":
        return cmd_sweep_rho(args)
    if args.command == "emit":
        return cmd_emit(args)
    raise AssertionError(f"unhandled command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return dispatch(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except ConvergenceError as exc:
        print(f"did not converge: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except StallError as exc:
        print(f"simulation stalled: {exc}", file=sys.stderr)
        return EXIT_STALL


if __name__ == "__main__":
    sys.exit(main())
