"""Multi-robot layer: clustering, entry graph, auction, and the simulator.

Robots run a two-block automaton. The navigation block moves them along
precomputed cluster tours ("busy") or on straight lines between clusters
("transit"); the coordination block maintains free/taken cluster lists,
selects the next cluster greedily by travel distance, and resolves conflicts
through bids inversely proportional to that distance. Communication rounds
are interleaved with motion ticks on a configurable schedule, and all loops
visit robots in id order, so a run is a pure function of the scenario seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cluster_dp import Cluster, ClusterPolicy, Tour
from .errors import NotVisibleError, ParameterError, ScenarioError, StallError
from .local_dp import hull_boundary
from .sensing import Pose, TargetBelief, kf_update, observation_cov, simulate_observation

DEPOT = "depot"


@dataclass(frozen=True)
class Partition:
    clusters: tuple  # tuple of tuples of global target indices

    def __post_init__(self):
        seen = set()
        for group in self.clusters:
            for t in group:
                if t in seen:
                    raise ParameterError(f"target {t} assigned to two clusters")
                seen.add(t)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)


def partition_targets(prior_means, m_max: int) -> Partition:
    """Recursive bisection by the largest-spread coordinate of the prior means."""
    means = np.asarray(prior_means, dtype=float)
    if means.ndim != 2 or means.shape[0] < 1:
        raise ParameterError("need at least one target mean")
    if m_max < 1:
        raise ParameterError("m_max must be >= 1")

    def split(indices):
        if len(indices) <= m_max:
            return [tuple(sorted(indices))]
        pts = means[indices]
        coord = int(np.argmax(pts.max(axis=0) - pts.min(axis=0)))
        ordered = sorted(indices, key=lambda t: (means[t, coord], t))
        half = math.ceil(len(ordered) / 2)
        return split(ordered[:half]) + split(ordered[half:])

    return Partition(clusters=tuple(split(list(range(means.shape[0])))))


@dataclass(frozen=True)
class ClusterEntry:
    """A cluster-level entry point: hull position of the cluster's pose cloud,
    identified by the owning target and that target's local entry index."""

    target: int
    entry: int
    position: tuple


@dataclass
class ClusterPlan:
    """Solved cluster: targets, policy with tours, and hull entry points."""

    cluster: Cluster
    policy: ClusterPolicy
    target_indices: tuple  # global target ids, aligned with cluster.targets
    entries: list = field(default_factory=list)

    def __post_init__(self):
        if not self.entries:
            self.entries = cluster_hull_entries(self.cluster)
        if not self.entries:
            raise ParameterError("cluster has no usable hull entry points")

    def tour_for(self, entry_idx: int) -> Tour:
        entry = self.entries[entry_idx]
        return self.policy.tour(entry.target, entry.entry)

    @property
    def entry_positions(self) -> np.ndarray:
        return np.array([e.position for e in self.entries])

    @property
    def diameter(self) -> float:
        pts = np.vstack([t.workspace.positions for t in self.cluster.targets])
        span = pts.max(axis=0) - pts.min(axis=0)
        return float(np.linalg.norm(span))


def cluster_hull_entries(cluster: Cluster) -> list:
    """Entry points of a cluster: pose positions on the hull of the union of
    its workspaces, mapped back to local entry indices."""
    owners, positions = [], []
    for i, target in enumerate(cluster.targets):
        for p_idx, pos in enumerate(target.workspace.positions):
            owners.append((i, p_idx))
            positions.append(pos)
    positions = np.asarray(positions)
    entries = []
    for flat in hull_boundary(positions):
        i, p_idx = owners[flat]
        boundary = cluster.targets[i].workspace.boundary
        if p_idx not in boundary:
            continue  # hull point of the union must lie on its own hull too
        j = boundary.index(p_idx)
        entries.append(ClusterEntry(target=i, entry=j, position=tuple(positions[flat])))
    return entries


@dataclass
class EntryGraph:
    """Directed inter-cluster edges from tour ends to closest entries.

    ``gap[(p, e, q)]`` is (entry index in q, straight-line distance from the
    end of tour (p, e) to that entry); the edge cost adds the tour length.
    """

    plans: list
    depot: np.ndarray
    gap: dict
    tour_length: dict

    def edge_cost(self, p: int, e: int, q: int) -> float:
        return self.tour_length[(p, e)] + self.gap[(p, e, q)][1]

    @property
    def median_edge_cost(self) -> float:
        costs = [self.edge_cost(p, e, q) for (p, e, q) in self.gap]
        if not costs:
            costs = [self.tour_length[k] for k in self.tour_length]
        return float(np.median(costs)) if costs else 1.0

    @property
    def max_edge_cost(self) -> float:
        costs = [self.edge_cost(p, e, q) for (p, e, q) in self.gap]
        return float(max(costs)) if costs else max(self.tour_length.values(), default=1.0)


def build_graph(plans, depot) -> EntryGraph:
    """Connect every entry's tour end to the closest entry of every other cluster."""
    gap, tour_length = {}, {}
    for p, plan in enumerate(plans):
        for e in range(len(plan.entries)):
            tour = plan.tour_for(e)
            tour_length[(p, e)] = tour.length
            end = tour.end_position
            for q, other in enumerate(plans):
                if q == p:
                    continue
                dists = np.linalg.norm(other.entry_positions - end, axis=1)
                best = int(np.argmin(dists))
                gap[(p, e, q)] = (best, float(dists[best]))
    return EntryGraph(plans=plans, depot=np.asarray(depot, dtype=float),
                      gap=gap, tour_length=tour_length)


# ---------------------------------------------------------------------------
# Robot state and navigation


@dataclass
class RobotState:
    robot_id: int
    position: np.ndarray
    mode: str = "transit"            # 'busy' | 'transit' | 'done'
    c_curr: object = None            # cluster index while busy
    c_next: object = None            # cluster index, DEPOT, or None before selection
    next_entry: object = None        # entry index within c_next's plan
    free: set = field(default_factory=set)
    taken: set = field(default_factory=set)
    bid: object = None
    tour: object = None
    tour_entry: object = None
    arc_pos: float = 0.0
    stop_idx: int = 0
    obs_done: int = 0
    distance: float = 0.0
    visited: list = field(default_factory=list)

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)


def start_tour(robot: RobotState, plan: ClusterPlan, entry_idx: int) -> None:
    robot.tour = plan.tour_for(entry_idx)
    robot.tour_entry = entry_idx
    robot.arc_pos = 0.0
    robot.stop_idx = 0
    robot.obs_done = 0
    robot.mode = "busy"


def navigate_busy(robot: RobotState, delta_ell: float):
    """One busy tick: take a pending observation at the current stop, else
    advance the arc position by ``delta_ell``, halting early only at stops
    that still have observations to take. Returns a tick event:
    ('observe', stop), ('moved', distance), or ('complete', None)."""
    tour = robot.tour
    stops = tour.stops
    while (robot.stop_idx < len(stops)
           and robot.arc_pos >= float(tour.cum_lengths[robot.stop_idx])):
        stop = stops[robot.stop_idx]
        if robot.obs_done < stop.n_obs:
            robot.obs_done += 1
            return ("observe", stop)
        robot.stop_idx += 1
        robot.obs_done = 0
    if robot.stop_idx >= len(stops):
        return ("complete", None)

    budget = delta_ell
    moved = 0.0
    while budget > 0 and robot.stop_idx < len(stops):
        stop_arc = float(tour.cum_lengths[robot.stop_idx])
        step = min(budget, stop_arc - robot.arc_pos)
        robot.arc_pos += step
        budget -= step
        moved += step
        if robot.arc_pos >= stop_arc:
            if stops[robot.stop_idx].n_obs > 0:
                break  # dwell here; observations start next tick
            robot.stop_idx += 1
            robot.obs_done = 0
    new_pos = tour.position_at(robot.arc_pos)
    robot.distance += float(np.linalg.norm(new_pos - robot.position))
    robot.position = new_pos
    return ("moved", moved)


def navigate_transit(robot: RobotState, target_position, delta_ell: float):
    """One straight-line step toward ``target_position``; snaps and reports
    ('arrived', None) when within ``delta_ell``, else ('moved', step)."""
    target = np.asarray(target_position, dtype=float)
    offset = target - robot.position
    dist = float(np.linalg.norm(offset))
    if dist <= delta_ell:
        robot.distance += dist
        robot.position = target.copy()
        return ("arrived", None)
    step = delta_ell * offset / dist
    robot.position = robot.position + step
    robot.distance += delta_ell
    return ("moved", delta_ell)


# ---------------------------------------------------------------------------
# Coordination: greedy selection and the local auction


@dataclass(frozen=True)
class AuctionMessage:
    """What one robot broadcasts each communication round."""

    sender: int
    taken: frozenset
    c_next: object
    bid: object
    position: tuple


def _busy_cost(graph: EntryGraph, robot: RobotState, cluster: int) -> float:
    remaining = max(robot.tour.length - robot.arc_pos, 0.0)
    _, gap = graph.gap[(robot.c_curr, robot.tour_entry, cluster)]
    return remaining + gap


def _transit_cost(graph: EntryGraph, robot: RobotState, cluster: int):
    dists = np.linalg.norm(graph.plans[cluster].entry_positions - robot.position, axis=1)
    best = int(np.argmin(dists))
    return float(dists[best]), best


def select_next(robot: RobotState, graph: EntryGraph):
    """Claim the free cluster with the smallest travel distance (lowest id on
    ties) and bid 1 / (1 + distance); with no free clusters, head to the depot."""
    if not robot.free:
        robot.c_next = DEPOT
        robot.next_entry = None
        robot.bid = None
        return robot
    best_cluster, best_cost, best_entry = None, None, None
    for cluster in sorted(robot.free):
        if robot.mode == "busy":
            cost = _busy_cost(graph, robot, cluster)
            _, entry = _transit_cost(graph, robot, cluster)  # refined on arrival
        else:
            cost, entry = _transit_cost(graph, robot, cluster)
        if best_cost is None or cost < best_cost:
            best_cluster, best_cost, best_entry = cluster, cost, entry
    robot.free.discard(best_cluster)
    robot.taken.add(best_cluster)
    robot.c_next = best_cluster
    robot.next_entry = best_entry
    robot.bid = 1.0 / (1.0 + best_cost)
    return robot


def auction_round(robots, graph: EntryGraph, comm_range: float):
    """One synchronous communication round over all robots.

    Each robot unions the taken lists of its neighbors (itself included),
    recomputes the free list, and resolves next-cluster conflicts: the
    strictly highest bid keeps the claim, exact ties go to the lowest robot
    id, and losers re-select from their updated free list.
    """
    n_clusters = len(graph.plans)
    messages = [AuctionMessage(sender=r.robot_id, taken=frozenset(r.taken),
                               c_next=r.c_next, bid=r.bid,
                               position=tuple(r.position)) for r in robots]
    for robot in robots:
        neighbors = [m for m in messages
                     if np.linalg.norm(np.asarray(m.position) - robot.position)
                     < comm_range]
        merged = set()
        for m in neighbors:
            merged |= m.taken
        robot.taken = merged
        robot.free = set(range(n_clusters)) - merged
        if not isinstance(robot.c_next, int):
            continue  # depot claims are never auctioned
        rivals = [m for m in neighbors
                  if m.sender != robot.robot_id and m.c_next == robot.c_next
                  and m.bid is not None]
        if not rivals:
            continue
        my_bid = messages[robot.robot_id].bid
        lost = any((m.bid > my_bid) or (m.bid == my_bid and m.sender < robot.robot_id)
                   for m in rivals)
        if lost:
            select_next(robot, graph)
    return robots


# ---------------------------------------------------------------------------
# The fleet simulator


@dataclass
class FleetTrace:
    tick_records: list = field(default_factory=list)
    obs_records: list = field(default_factory=list)
    target_summary: list = field(default_factory=list)
    robot_summary: list = field(default_factory=list)
    n_ticks: int = 0
    n_rounds: int = 0


@dataclass
class SimSettings:
    comm_range: float
    delta_ell: float = None
    comm_every: int = 1
    noiseless: bool = False
    stall_factor: float = 10.0
    enforce_comm_range: bool = True  # require comm_range > largest cluster diameter

    def __post_init__(self):
        if self.comm_range <= 0:
            raise ParameterError("comm_range must be positive")
        if self.comm_every < 1:
            raise ParameterError("comm_every must be >= 1")


def simulate(plans, graph: EntryGraph, starts, depot, truths, beliefs, settings: SimSettings,
             rng) -> FleetTrace:
    """Run the fleet until every robot is done; returns the full trace.

    ``truths`` are ground-truth target vectors (global indexing), ``beliefs``
    the prior TargetBelief list updated by the simulated Kalman filter.
    """
    n_clusters = len(plans)
    if settings.enforce_comm_range:
        worst = max(plan.diameter for plan in plans)
        if settings.comm_range <= worst:
            raise ScenarioError(
                f"comm_range {settings.comm_range:g} must exceed the largest "
                f"cluster diameter {worst:g}")
    delta_ell = settings.delta_ell
    if delta_ell is None:
        delta_ell = graph.median_edge_cost / 50.0
    if delta_ell <= 0:
        raise ParameterError("delta_ell must be positive")

    robots = [RobotState(robot_id=i, position=np.asarray(pos, dtype=float),
                         free=set(range(n_clusters)))
              for i, pos in enumerate(starts)]
    beliefs = [TargetBelief(mean=b.mean.copy(), cov=b.cov.copy()) for b in beliefs]
    depot = np.asarray(depot, dtype=float)

    # initial decentralized selection: every robot picks from its own full
    # free list; the first communication rounds resolve the collisions
    for robot in robots:
        select_next(robot, graph)

    trace = FleetTrace()
    stall_limit = max(int(settings.stall_factor * graph.max_edge_cost / delta_ell), 100)
    last_progress = 0
    tick = 0
    rounds = 0
    obs_count = [0] * len(truths)

    def record_tick(round_idx):
        for robot in robots:
            trace.tick_records.append({
                "kind": "tick",
                "tick": tick,
                "round": round_idx,
                "robot": robot.robot_id,
                "mode": robot.mode,
                "position": [float(x) for x in robot.position],
                "c_curr": robot.c_curr,
                "c_next": robot.c_next,
                "bid": None if robot.bid is None else float(robot.bid),
                "free_count": len(robot.free),
            })

    def observe(robot, stop):
        plan = plans[robot.c_curr]
        local = stop.target
        global_idx = plan.target_indices[local]
        target = plan.cluster.targets[local]
        pose = Pose(position=stop.position)
        prior_mean = target.belief.mean
        if settings.noiseless:
            value = truths[global_idx].copy()
            q = observation_cov(target.sensor, prior_mean, pose)
        else:
            try:
                value, q = simulate_observation(target.sensor, truths[global_idx],
                                                pose, rng, mean=prior_mean)
            except NotVisibleError:
                return
        beliefs[global_idx] = kf_update(beliefs[global_idx], value, q)
        obs_count[global_idx] += 1
        err = float(np.linalg.norm(beliefs[global_idx].mean - truths[global_idx]))
        trace.obs_records.append({
            "kind": "obs",
            "tick": tick,
            "robot": robot.robot_id,
            "target": int(global_idx),
            "estimate": [float(x) for x in beliefs[global_idx].mean],
            "error_trace": float(np.trace(beliefs[global_idx].cov)),
            "error": err,
        })

    while any(r.mode != "done" for r in robots):
        progress = False
        if tick % settings.comm_every == 0:
            before = [(r.c_next, frozenset(r.taken)) for r in robots]
            auction_round(robots, graph, settings.comm_range)
            rounds += 1
            after = [(r.c_next, frozenset(r.taken)) for r in robots]
            if before != after:
                progress = True

        for robot in robots:
            if robot.mode == "done":
                continue
            if robot.mode == "busy":
                event, payload = navigate_busy(robot, delta_ell)
                if event == "observe":
                    observe(robot, payload)
                    progress = True
                elif event == "moved":
                    progress = payload > 0 or progress
                else:  # complete
                    robot.mode = "transit"
                    robot.tour = None
                    robot.c_curr = None
                    progress = True
            elif robot.mode == "transit":
                if robot.c_next is None:
                    select_next(robot, graph)
                    progress = True
                    continue
                if robot.c_next == DEPOT:
                    event, _ = navigate_transit(robot, depot, delta_ell)
                    if event == "arrived":
                        robot.mode = "done"
                        robot.bid = None
                    progress = True
                    continue
                # closest entry of the destination, re-evaluated every tick
                dists = np.linalg.norm(
                    plans[robot.c_next].entry_positions - robot.position, axis=1)
                entry_idx = int(np.argmin(dists))
                robot.next_entry = entry_idx
                target_pos = plans[robot.c_next].entries[entry_idx].position
                event, _ = navigate_transit(robot, target_pos, delta_ell)
                progress = True
                if event == "arrived":
                    cluster_idx = robot.c_next
                    robot.c_curr = cluster_idx
                    robot.visited.append(cluster_idx)
                    start_tour(robot, plans[cluster_idx], entry_idx)
                    robot.c_next = None
                    select_next(robot, graph)

        record_tick(rounds - 1)
        if progress:
            last_progress = tick
        if tick - last_progress > stall_limit:
            raise StallError(
                f"no progress for {stall_limit} ticks at tick {tick}; "
                f"modes={[r.mode for r in robots]}")
        tick += 1

    trace.n_ticks = tick
    trace.n_rounds = rounds
    for idx, belief in enumerate(beliefs):
        trace.target_summary.append({
            "target": idx,
            "error_trace": float(np.trace(belief.cov)),
            "error": float(np.linalg.norm(belief.mean - truths[idx])),
            "observations": obs_count[idx],
        })
    for robot in robots:
        trace.robot_summary.append({
            "robot": robot.robot_id,
            "distance": float(robot.distance),
            "clusters": list(robot.visited),
        })
    return trace
