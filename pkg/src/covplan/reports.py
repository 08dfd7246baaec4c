"""Report emission: delimited series plus rendered figures.

Every emitter writes a CSV and a PNG side by side in the output directory.
Sources are either run-report JSON files or fleet trace JSONL files.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .errors import ScenarioError

EMIT_KINDS = ("rho-sweep", "error-vs-observations", "assignment-timeline",
              "trajectory-polyline")


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _load_report(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _load_trace_records(path):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def emit_rho_sweep(report: dict, out_dir: Path):
    rows = report.get("series", {}).get("rho_sweep")
    if rows is None:
        raise ScenarioError("report has no rho_sweep series")
    csv_path = out_dir / "rho_sweep.csv"
    _write_csv(csv_path, ["rho", "reward", "uncertainty_reduction", "distance"],
               [[r["rho"], repr(r["reward"]), repr(r["uncertainty_reduction"]),
                 repr(r["distance"])] for r in rows])

    plt = _plt()
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2), sharex=True)
    rhos = [r["rho"] for r in rows]
    for ax, key, label in zip(
            axes,
            ["reward", "uncertainty_reduction", "distance"],
            ["total reward", "uncertainty reduction", "distance traveled"]):
        ax.plot(rhos, [r[key] for r in rows], "o-")
        ax.set_xlabel("rho")
        ax.set_ylabel(label)
    fig.tight_layout()
    png_path = out_dir / "rho_sweep.png"
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return [csv_path, png_path]


def emit_error_vs_observations(report: dict, out_dir: Path):
    rows = report.get("series", {}).get("error_vs_observations")
    if rows is None:
        raise ScenarioError("report has no error_vs_observations series")
    csv_path = out_dir / "error_vs_observations.csv"
    _write_csv(csv_path, ["observation", "mean_error", "std_error"],
               [[r["observation"], repr(r["mean_error"]), repr(r["std_error"])]
                for r in rows])

    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.errorbar([r["observation"] for r in rows], [r["mean_error"] for r in rows],
                yerr=[r["std_error"] for r in rows], fmt="o-", capsize=2)
    ax.set_xlabel("number of observations")
    ax.set_ylabel("sum of estimate errors")
    fig.tight_layout()
    png_path = out_dir / "error_vs_observations.png"
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return [csv_path, png_path]


def emit_assignment_timeline(records, out_dir: Path):
    ticks = [r for r in records if r.get("kind") == "tick"]
    if not ticks:
        raise ScenarioError("trace has no tick records")
    csv_path = out_dir / "assignment_timeline.csv"
    rows = []
    for r in ticks:
        cluster = r["c_curr"] if r["mode"] == "busy" else r["c_next"]
        rows.append([r["tick"], r["robot"], r["mode"],
                     "" if cluster is None else cluster])
    _write_csv(csv_path, ["tick", "robot", "mode", "cluster"], rows)

    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 3.4))
    robots = sorted({r["robot"] for r in ticks})
    for robot in robots:
        xs, ys = [], []
        for r in ticks:
            if r["robot"] != robot:
                continue
            cluster = r["c_curr"] if r["mode"] == "busy" else r["c_next"]
            if isinstance(cluster, int):
                xs.append(r["tick"])
                ys.append(cluster)
        ax.step(xs, ys, where="post", label=f"robot {robot}")
    ax.set_xlabel("tick")
    ax.set_ylabel("assigned cluster")
    ax.legend(fontsize=7)
    fig.tight_layout()
    png_path = out_dir / "assignment_timeline.png"
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return [csv_path, png_path]


def emit_trajectory(source, out_dir: Path):
    """Positions over time, from a fleet trace (one row per tick record) or a
    single-target report (one row per rollout step)."""
    if isinstance(source, list):  # trace records
        ticks = [r for r in source if r.get("kind") == "tick"]
        if not ticks:
            raise ScenarioError("trace has no tick records")
        header = ["tick", "robot"] + [ax for ax, _ in zip("xyz", ticks[0]["position"])]
        rows = [[r["tick"], r["robot"]] + [repr(v) for v in r["position"]] for r in ticks]
        paths = {r["robot"]: [] for r in ticks}
        for r in ticks:
            paths[r["robot"]].append(r["position"])
    else:  # run report
        steps = source.get("series", {}).get("trajectory")
        if steps is None:
            raise ScenarioError("report has no trajectory series")
        header = ["step", "robot"] + [ax for ax, _ in zip("xyz", steps[0]["position"])]
        rows = [[s["step"], 0] + [repr(v) for v in s["position"]] for s in steps]
        paths = {0: [s["position"] for s in steps]}

    csv_path = out_dir / "trajectory.csv"
    _write_csv(csv_path, header, rows)

    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 5))
    for robot, pts in sorted(paths.items()):
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        ax.plot(xs, ys, "-", linewidth=0.8, label=f"robot {robot}")
        ax.plot(xs[:1], ys[:1], "s", markersize=4)
        ax.plot(xs[-1:], ys[-1:], "^", markersize=4)
    ax.set_aspect("equal", adjustable="datalim")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if len(paths) > 1:
        ax.legend(fontsize=7)
    fig.tight_layout()
    png_path = out_dir / "trajectory.png"
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return [csv_path, png_path]


def emit(kind: str, source_path, out_dir) -> list:
    """Dispatch one emission kind against a report JSON or trace JSONL file."""
    if kind not in EMIT_KINDS:
        raise ScenarioError(f"unknown emit kind '{kind}'; choose from {EMIT_KINDS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source_path = Path(source_path)
    if kind == "rho-sweep":
        return emit_rho_sweep(_load_report(source_path), out_dir)
    if kind == "error-vs-observations":
        return emit_error_vs_observations(_load_report(source_path), out_dir)
    if kind == "assignment-timeline":
        return emit_assignment_timeline(_load_trace_records(source_path), out_dir)
    if source_path.suffix == ".jsonl":
        return emit_trajectory(_load_trace_records(source_path), out_dir)
    return emit_trajectory(_load_report(source_path), out_dir)
