"""Pipeline runners: discretize, solve, roll out, simulate, and account.

Each runner returns a RunReport with stage timings, state-space sizes, reward
totals, and the series needed for the report emitters. All randomness flows
from the scenario seed through named substreams, so identical scenarios give
bit-identical reports and traces.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import cluster_dp, covgrid, fleet, local_dp, sensing
from .errors import ScenarioError
from .scenario import Scenario, expand_target, fleet_depot, fleet_starts
from .utils import content_hash, np_to_list, substream

BASELINE_NAMES = ("closer", "static", "circle", "random")


@dataclass
class RunReport:
    kind: str
    timings: dict = field(default_factory=dict)
    sizes: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return np_to_list({
            "kind": self.kind,
            "timings": self.timings,
            "sizes": self.sizes,
            "totals": self.totals,
            "series": self.series,
        })

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)


class _Stages:
    def __init__(self):
        self.timings = {}

    def time(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.start = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = timer.timings.get(name, 0.0) + (
                    time.perf_counter() - self.start)

        return _Ctx()


class AssetCache:
    """Shares covariance grids and local policies across identical targets."""

    def __init__(self):
        self.grids = {}
        self.policies = {}

    def grid_for(self, params, scenario_seed):
        key = content_hash({"params": params.to_dict(), "seed": scenario_seed})
        if key not in self.grids:
            digest = int(key[:12], 16)
            self.grids[key] = covgrid.assemble(params, seed=(scenario_seed + digest) % 2**62)
        return self.grids[key]


def prepare_target(scenario: Scenario, index: int, cache: AssetCache, config=None):
    """Workspace + grid + solved local policy for one target."""
    assets = expand_target(scenario, index)
    grid = cache.grid_for(assets.grid_params, scenario.seed)
    config = config or scenario.dp
    key = (content_hash({"w": assets.workspace.content_hash(), "g": grid.content_hash(),
                         "m": np_to_list(assets.belief.mean), "c": config.to_dict()}))
    if key not in cache.policies:
        cache.policies[key] = local_dp.solve(assets.workspace, grid, assets.sensor,
                                             assets.belief.mean, config)
    return assets, grid, cache.policies[key]


def _entry_state(scenario: Scenario, workspace, grid, prior_cov):
    entry_idx = int(scenario.sim_spec["entry"].get("index", 0))
    boundary = workspace.boundary
    pose_idx = boundary[entry_idx % len(boundary)]
    return local_dp.LocalState(pose_idx=pose_idx,
                               cov_idx=covgrid.project(grid, prior_cov))


def _accounting(workspace, grid, states, actions, rewards, gamma):
    """Reward decomposition over one trajectory (physical distance included)."""
    traces = grid.traces
    positions = np.array([workspace.poses[s.pose_idx].position for s in states])
    reduction = sum(
        np.sqrt(max(traces[a.cov_idx] - traces[b.cov_idx], 0.0))
        for a, b in zip(states, states[1:]))
    distance = float(np.sum(np.linalg.norm(np.diff(positions, axis=0), axis=1)))
    travel_cost = float(sum(workspace.travel_cost[a] for a in actions))
    discounted = float(sum(r * gamma ** k for k, r in enumerate(rewards)))
    return {
        "reward": discounted,
        "uncertainty_reduction": float(reduction),
        "distance": distance,
        "travel_cost": travel_cost,
        "steps": len(actions),
    }


def _trajectory_series(workspace, grid, states, rewards):
    traces = grid.traces
    rows = []
    for k, state in enumerate(states):
        rows.append({
            "step": k,
            "position": list(workspace.poses[state.pose_idx].position),
            "cov_trace": float(traces[state.cov_idx]),
            "reward": float(rewards[k - 1]) if 0 < k <= len(rewards) else 0.0,
        })
    return rows


def run_single_target(scenario: Scenario, config=None, cache=None) -> RunReport:
    """Local pipeline on a one-target scenario: solve, roll out, account."""
    if scenario.n_targets != 1:
        raise ScenarioError(f"single-target run needs exactly 1 target, "
                            f"got {scenario.n_targets}")
    cache = cache or AssetCache()
    config = config or scenario.dp
    stages = _Stages()
    with stages.time("prepare"):
        assets, grid, policy = prepare_target(scenario, 0, cache, config)
    with stages.time("rollout"):
        start = _entry_state(scenario, assets.workspace, grid, assets.belief.cov)
        roll = local_dp.rollout(policy, assets.workspace, grid, assets.sensor, start)
    report = RunReport(kind="single")
    report.timings = stages.timings
    report.sizes = {
        "n_poses": len(assets.workspace.poses),
        "n_cov": len(grid),
        "n_states": policy.n_states,
    }
    report.totals = _accounting(assets.workspace, grid, roll.states, roll.actions,
                                roll.rewards, config.gamma)
    report.totals["value_at_entry"] = policy.value_at(start)
    report.totals["absorbed"] = roll.states[-1].cov_idx == grid.zero_index
    report.series["trajectory"] = _trajectory_series(assets.workspace, grid,
                                                     roll.states, roll.rewards)
    return report


def _baseline_action(name, workspace, grid, sensor, target_mean, state, rng):
    positions = workspace.positions
    mean = np.asarray(target_mean)[: positions.shape[1]]
    if name == "static":
        action = workspace.stationary_action
        return 0 if action is None else action
    if name == "closer":
        ranges = [np.linalg.norm(positions[workspace.transition[state.pose_idx, a]] - mean)
                  for a in range(len(workspace.actions))]
        return int(np.argmin(ranges))
    if name == "circle":
        here = np.linalg.norm(positions[state.pose_idx] - mean)
        for a in range(len(workspace.actions)):
            nxt = workspace.transition[state.pose_idx, a]
            if nxt == state.pose_idx:
                continue
            if abs(np.linalg.norm(positions[nxt] - mean) - here) < 1e-9:
                return a
        return workspace.stationary_action or 0
    if name == "random":
        return int(rng.integers(0, len(workspace.actions)))
    raise ScenarioError(f"unknown baseline policy '{name}'")


def run_baseline(scenario: Scenario, policy_name: str, cache=None) -> RunReport:
    """Scripted heuristic rollout under the same reward accounting as the DP."""
    if policy_name not in BASELINE_NAMES:
        raise ScenarioError(f"baseline must be one of {BASELINE_NAMES}")
    if scenario.n_targets != 1:
        raise ScenarioError("baseline run needs exactly 1 target")
    cache = cache or AssetCache()
    config = scenario.dp
    stages = _Stages()
    with stages.time("prepare"):
        assets, grid, _ = prepare_target(scenario, 0, cache, config)
    rng = substream(scenario.seed, "baseline", policy_name)
    horizon = int(scenario.sim_spec["baseline_horizon"])

    with stages.time("rollout"):
        state = _entry_state(scenario, assets.workspace, grid, assets.belief.cov)
        states, actions, rewards = [state], [], []
        for _ in range(horizon):
            action = _baseline_action(policy_name, assets.workspace, grid,
                                      assets.sensor, assets.belief.mean, state, rng)
            nxt = local_dp.step(assets.workspace, grid, assets.sensor,
                                assets.belief.mean, state, action)
            if nxt == state and policy_name != "random":
                break  # deterministic heuristics stop at their fixed point
            rewards.append(local_dp.reward(assets.workspace, grid, state, nxt,
                                           action, config))
            actions.append(action)
            states.append(nxt)
            state = nxt

    report = RunReport(kind=f"baseline:{policy_name}")
    report.timings = stages.timings
    report.sizes = {"n_poses": len(assets.workspace.poses), "n_cov": len(grid)}
    report.totals = _accounting(assets.workspace, grid, states, actions, rewards,
                                config.gamma)
    report.series["trajectory"] = _trajectory_series(assets.workspace, grid,
                                                     states, rewards)
    return report


def sweep_rho(scenario: Scenario, rho_values=None) -> RunReport:
    """Re-solve the single-target problem across a rho grid."""
    values = rho_values if rho_values is not None else scenario.sim_spec["rho_values"]
    cache = AssetCache()
    rows = []
    stages = _Stages()
    with stages.time("sweep"):
        for rho in values:
            config = replace(scenario.dp, rho=float(rho))
            sub = run_single_target(scenario, config=config, cache=cache)
            rows.append({
                "rho": float(rho),
                "reward": sub.totals["reward"],
                "uncertainty_reduction": sub.totals["uncertainty_reduction"],
                "distance": sub.totals["distance"],
                "travel_cost": sub.totals["travel_cost"],
                "steps": sub.totals["steps"],
            })
    report = RunReport(kind="rho_sweep")
    report.timings = stages.timings
    report.series["rho_sweep"] = rows
    report.totals = {"points": len(rows)}
    return report


def _truths(scenario: Scenario, beliefs):
    if scenario.sim_spec["truth"] == "prior_mean":
        return [b.mean.copy() for b in beliefs]
    truths = []
    for i, belief in enumerate(beliefs):
        rng = substream(scenario.seed, "truth", str(i))
        truths.append(rng.multivariate_normal(belief.mean, belief.cov))
    return truths


def build_cluster_plan(scenario: Scenario, target_indices, cache: AssetCache,
                       cluster_cache=None):
    """Solve one cluster (local policies, rollouts, cluster DP, tours)."""
    members = []
    for t in target_indices:
        assets, grid, policy = prepare_target(scenario, t, cache)
        members.append(cluster_dp.ClusterTarget(
            belief=assets.belief, workspace=assets.workspace, grid=grid,
            sensor=assets.sensor, policy=policy))
    cluster = cluster_dp.precompute_rollouts(cluster_dp.Cluster(targets=members))
    key = content_hash({
        "targets": [
            {"w": m.workspace.content_hash(), "g": m.grid.content_hash(),
             "mean": np_to_list(m.belief.mean), "cov": np_to_list(m.belief.cov)}
            for m in members
        ],
        "dp": scenario.dp.to_dict(),
    })
    if cluster_cache is not None and key in cluster_cache:
        policy = cluster_cache[key]
    else:
        policy = cluster_dp.solve_cluster(cluster, scenario.dp,
                                          m_max=int(scenario.fleet_spec["m_max"]))
        if cluster_cache is not None:
            cluster_cache[key] = policy
    return fleet.ClusterPlan(cluster=cluster, policy=policy,
                             target_indices=tuple(target_indices))


def run_cluster(scenario: Scenario) -> RunReport:
    """Single-robot cluster pipeline plus Monte-Carlo filter repetitions."""
    m_max = int(scenario.fleet_spec["m_max"])
    if scenario.n_targets > m_max:
        raise ScenarioError(f"cluster run allows at most m_max={m_max} targets")
    cache = AssetCache()
    stages = _Stages()
    with stages.time("solve"):
        plan = build_cluster_plan(scenario, tuple(range(scenario.n_targets)), cache)
    entry_spec = scenario.sim_spec["entry"]
    target0 = int(entry_spec.get("target", 0))
    entry0 = int(entry_spec.get("index", 0)) % len(plan.cluster.entries[target0])
    tour = plan.policy.tour(target0, entry0)

    beliefs0 = [t.belief for t in plan.cluster.targets]
    truths = _truths(scenario, beliefs0)
    noiseless = scenario.sim_spec["noise"] == "none"
    reps = int(scenario.sim_spec["repetitions"])

    with stages.time("montecarlo"):
        error_rows = np.zeros((reps, tour.n_observations + 1))
        for rep in range(reps):
            rng = substream(scenario.seed, "mc", str(rep))
            beliefs = [sensing.TargetBelief(mean=b.mean.copy(), cov=b.cov.copy())
                       for b in beliefs0]
            obs_idx = 0
            error_rows[rep, 0] = sum(np.linalg.norm(b.mean - t)
                                     for b, t in zip(beliefs, truths))
            for stop in tour.stops:
                target = plan.cluster.targets[stop.target]
                pose = sensing.Pose(position=stop.position)
                for _ in range(stop.n_obs):
                    if noiseless:
                        value = truths[stop.target].copy()
                        q = sensing.observation_cov(target.sensor, target.belief.mean, pose)
                    else:
                        value, q = sensing.simulate_observation(
                            target.sensor, truths[stop.target], pose, rng,
                            mean=target.belief.mean)
                    beliefs[stop.target] = sensing.kf_update(beliefs[stop.target], value, q)
                    obs_idx += 1
                    error_rows[rep, obs_idx] = sum(np.linalg.norm(b.mean - t)
                                                   for b, t in zip(beliefs, truths))

    report = RunReport(kind="cluster")
    report.timings = stages.timings
    report.sizes = {
        "n_targets": scenario.n_targets,
        "reachable_states": plan.policy.n_reachable,
        "entries": [len(e) for e in plan.cluster.entries],
    }
    report.totals = {
        "tour_reward": tour.reward,
        "tour_length": tour.length,
        "observations": tour.n_observations,
        "final_error_mean": float(error_rows[:, -1].mean()),
        "repetitions": reps,
    }
    report.series["error_vs_observations"] = [
        {"observation": k,
         "mean_error": float(error_rows[:, k].mean()),
         "std_error": float(error_rows[:, k].std(ddof=1)) if reps > 1 else 0.0}
        for k in range(tour.n_observations + 1)
    ]
    report.series["tour"] = [
        {"position": list(map(float, s.position)), "target": s.target, "dwell": s.n_obs}
        for s in tour.stops
    ]
    return report


def run_fleet(scenario: Scenario, threads: int = 1) -> tuple:
    """Partition, solve every cluster, build the graph, and simulate the fleet.

    Returns (RunReport, FleetTrace).
    """
    cache = AssetCache()
    cluster_cache = {}
    stages = _Stages()
    with stages.time("partition"):
        means = np.vstack([t.mean for t in scenario.targets])
        partition = fleet.partition_targets(means, int(scenario.fleet_spec["m_max"]))
    with stages.time("solve_clusters"):
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                plans = list(pool.map(
                    lambda group: build_cluster_plan(scenario, group, AssetCache(),
                                                     cluster_cache=None),
                    partition.clusters))
        else:
            plans = [build_cluster_plan(scenario, group, cache, cluster_cache)
                     for group in partition.clusters]
    with stages.time("graph"):
        depot = fleet_depot(scenario)
        graph = fleet.build_graph(plans, depot)
    with stages.time("simulate"):
        by_target = {}
        for group, plan in zip(partition.clusters, plans):
            for local, global_idx in enumerate(group):
                by_target[global_idx] = plan.cluster.targets[local].belief
        beliefs = [by_target[i] for i in range(scenario.n_targets)]
        truths = _truths(scenario, beliefs)
        settings = fleet.SimSettings(
            comm_range=float(scenario.fleet_spec["comm_range"]),
            delta_ell=scenario.fleet_spec["delta_ell"],
            comm_every=int(scenario.fleet_spec["comm_every"]),
            noiseless=scenario.sim_spec["noise"] == "none",
            stall_factor=float(scenario.fleet_spec["stall_factor"]))
        rng = substream(scenario.seed, "fleet")
        trace = fleet.simulate(plans, graph, fleet_starts(scenario), depot,
                               truths, beliefs, settings, rng)

    visits = [c for r in trace.robot_summary for c in r["clusters"]]
    report = RunReport(kind="fleet")
    report.timings = stages.timings
    report.sizes = {
        "n_targets": scenario.n_targets,
        "n_clusters": partition.n_clusters,
        "n_robots": int(scenario.fleet_spec["n_robots"]),
        "cluster_sizes": [len(g) for g in partition.clusters],
        "reachable_states": [p.policy.n_reachable for p in plans],
    }
    report.totals = {
        "ticks": trace.n_ticks,
        "rounds": trace.n_rounds,
        "total_distance": float(sum(r["distance"] for r in trace.robot_summary)),
        "clusters_visited": sorted(visits),
        "exclusive": sorted(visits) == list(range(partition.n_clusters)),
        "max_error_trace": max(r["error_trace"] for r in trace.target_summary),
        "observations": int(sum(r["observations"] for r in trace.target_summary)),
    }
    report.series["targets"] = trace.target_summary
    report.series["robots"] = trace.robot_summary
    report.series["assignments"] = [
        {"tick": r["tick"], "robot": r["robot"],
         "cluster": r["c_curr"] if r["mode"] == "busy" else r["c_next"],
         "mode": r["mode"]}
        for r in trace.tick_records
    ]
    return report, trace


def write_trace_jsonl(trace, path) -> None:
    """Byte-stable JSONL: one record per line, sorted keys, compact separators."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in trace.tick_records + trace.obs_records:
            fh.write(json.dumps(record, sort_keys=True, separators=(",", ":")))
            fh.write("\n")


def write_fleet_summary_csv(trace, path) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kind", "id", "error_trace", "error", "observations",
                         "distance", "clusters"])
        for row in trace.target_summary:
            writer.writerow(["target", row["target"], repr(row["error_trace"]),
                             repr(row["error"]), row["observations"], "", ""])
        for row in trace.robot_summary:
            writer.writerow(["robot", row["robot"], "", "", "",
                             repr(row["distance"]),
                             ";".join(str(c) for c in row["clusters"])])
