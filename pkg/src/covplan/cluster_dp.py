"""Cluster-level dynamic program over (visitation bitmask, target, entry, depth).

Within a cluster, a robot either continues the current target's precomputed
local-optimal rollout (earning the cached local reward while the target's
visitation bit is still set) or switches to another target, which clears the
departed target's bit and moves the robot to the closest entry point of the
new target, earning only the travel penalty. Local rollouts are finite
(every local optimal trajectory reaches an absorbing state), so the cluster
state space is finite and value iteration is exact on the subset reachable
from full-bitmask entry states.

Tours extracted from the policy are arc-length parameterized polylines with
per-position observation counts, ready for the fleet navigation layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import covgrid
from .errors import ClusterSizeError, ConvergenceError, ParameterError
from .local_dp import DpConfig, LocalState, Rollout, rollout as run_rollout
from .sensing import TargetBelief
from .utils import np_to_list


def entry_points(workspace, prior_cov, grid) -> list:
    """One candidate start state per boundary pose, covariance = projected prior."""
    if not workspace.boundary:
        raise ParameterError("workspace has no boundary poses")
    cov_idx = covgrid.project(grid, prior_cov)
    return [LocalState(pose_idx=p, cov_idx=cov_idx) for p in workspace.boundary]


@dataclass
class ClusterTarget:
    """Everything the cluster DP needs about one target."""

    belief: TargetBelief
    workspace: object
    grid: object
    sensor: object
    policy: object


@dataclass
class Cluster:
    targets: list
    entries: list = field(default_factory=list)   # per target: list of LocalState
    rollouts: list = field(default_factory=list)  # per target: list of Rollout

    def __post_init__(self):
        if not self.targets:
            raise ParameterError("a cluster needs at least one target")
        if not self.entries:
            self.entries = [
                entry_points(t.workspace, t.belief.cov, t.grid) for t in self.targets
            ]
        seen = set()
        for t in self.targets:
            for pos in map(tuple, t.workspace.positions):
                if pos in seen:
                    raise ParameterError("target workspaces overlap (shared position)")
                seen.add(pos)
        self._tables = None

    @property
    def size(self) -> int:
        return len(self.targets)

    def entry_position(self, target_idx: int, entry_idx: int) -> np.ndarray:
        state = self.entries[target_idx][entry_idx]
        return np.asarray(self.targets[target_idx].workspace.poses[state.pose_idx].position)


def precompute_rollouts(cluster: Cluster) -> Cluster:
    """Run the local policy from every entry of every target and cache the
    trajectories, their positions, and the inter-target entry-selection tables."""
    cluster.rollouts = []
    for target, entries in zip(cluster.targets, cluster.entries):
        cluster.rollouts.append([
            run_rollout(target.policy, target.workspace, target.grid,
                        target.sensor, entry)
            for entry in entries
        ])
    cluster._tables = _ClusterTables(cluster)
    return cluster


@dataclass(frozen=True)
class ClusterState:
    """visited: bitmask, bit i set while target i's reward is still available."""

    visited: int
    current: int
    entry: int
    depth: int


class _ClusterTables:
    """Flattened micro-state view of all (target, entry, depth) triples.

    This is the single source of truth for transitions and rewards: the
    public ``transition``/``cluster_reward`` functions and the vectorized
    solver both read these tables.
    """

    def __init__(self, cluster: Cluster):
        m = cluster.size
        self.m = m
        base = []
        micro_i, micro_j, micro_k = [], [], []
        self.positions = []   # per (i, j): (K+1, d) rollout positions
        self.k_max = []       # per (i, j): K
        for i, (target, rollouts) in enumerate(zip(cluster.targets, cluster.rollouts)):
            base.append([])
            for j, roll in enumerate(rollouts):
                base[i].append(len(micro_i))
                k_len = roll.K
                self.k_max.append(k_len)
                self.positions.append(roll.positions(target.workspace))
                for k in range(k_len + 1):
                    micro_i.append(i)
                    micro_j.append(j)
                    micro_k.append(k)
        self.base = base
        self.micro_i = np.asarray(micro_i, dtype=np.int64)
        self.micro_j = np.asarray(micro_j, dtype=np.int64)
        self.micro_k = np.asarray(micro_k, dtype=np.int64)
        self.n_micro = len(micro_i)

        flat_idx = {}
        for i in range(m):
            for j in range(len(base[i])):
                flat_idx[(i, j)] = len(flat_idx)
        self.flat_idx = flat_idx

        # continue action: depth + 1 capped at K (self-loop past absorption);
        # cached local reward while the bit is set, travel displacement else
        cont_next = np.arange(self.n_micro, dtype=np.int64)
        cont_reward = np.zeros(self.n_micro)
        cont_travel = np.zeros(self.n_micro)
        for micro in range(self.n_micro):
            i, j, k = self.micro_i[micro], self.micro_j[micro], self.micro_k[micro]
            roll = cluster.rollouts[i][j]
            if k < roll.K:
                cont_next[micro] = micro + 1
                cont_reward[micro] = roll.rewards[k]
                pos = self.positions[flat_idx[(i, j)]]
                cont_travel[micro] = float(np.linalg.norm(pos[k + 1] - pos[k]))
        self.cont_next = cont_next
        self.cont_reward = cont_reward
        self.cont_travel = cont_travel

        # switch action: nearest entry of the destination target, by position
        entry_pos = [np.array([cluster.entry_position(i, j)
                               for j in range(len(cluster.entries[i]))])
                     for i in range(m)]
        self.switch_micro = np.zeros((m, self.n_micro), dtype=np.int64)
        self.switch_dist = np.zeros((m, self.n_micro))
        for micro in range(self.n_micro):
            i, j, k = self.micro_i[micro], self.micro_j[micro], self.micro_k[micro]
            here = self.positions[flat_idx[(i, j)]][k]
            for ell in range(m):
                if ell == i:
                    continue
                dists = np.linalg.norm(entry_pos[ell] - here, axis=1)
                j_new = int(np.argmin(dists))
                self.switch_micro[ell, micro] = base[ell][j_new]
                self.switch_dist[ell, micro] = float(dists[j_new])

    def micro_index(self, state: ClusterState) -> int:
        return self.base[state.current][state.entry] + state.depth

    def micro_state(self, visited: int, micro: int) -> ClusterState:
        return ClusterState(visited=int(visited), current=int(self.micro_i[micro]),
                            entry=int(self.micro_j[micro]), depth=int(self.micro_k[micro]))

    def rollout_position(self, state: ClusterState) -> np.ndarray:
        return self.positions[self.flat_idx[(state.current, state.entry)]][state.depth]


def _tables(cluster: Cluster) -> _ClusterTables:
    if cluster._tables is None:
        raise ParameterError("cluster rollouts not precomputed; call precompute_rollouts")
    return cluster._tables


def transition(cluster: Cluster, state: ClusterState, action: int) -> ClusterState:
    """Cluster transition: continue the current rollout or switch targets.

    Switching clears the departed target's visitation bit and enters the
    destination at its entry point closest to the robot's current position
    (lowest entry index on exact ties).
    """
    tables = _tables(cluster)
    micro = tables.micro_index(state)
    if action == state.current:
        return tables.micro_state(state.visited, tables.cont_next[micro])
    new_mask = state.visited & ~(1 << state.current)
    return tables.micro_state(new_mask, tables.switch_micro[action, micro])


def cluster_reward(cluster: Cluster, state: ClusterState, action: int,
                   config: DpConfig) -> float:
    """Cached local reward while continuing an unvisited target; otherwise the
    travel penalty of the move (no positive reward once the bit is cleared)."""
    tables = _tables(cluster)
    micro = tables.micro_index(state)
    if action == state.current:
        if (state.visited >> state.current) & 1:
            return float(tables.cont_reward[micro])
        return -config.rho * float(tables.cont_travel[micro])
    return -config.rho * float(tables.switch_dist[action, micro])


@dataclass
class TourStop:
    position: tuple
    target: int
    n_obs: int


@dataclass
class Tour:
    """Arc-length parameterized polyline with per-stop observation counts."""

    entry: tuple             # (target index, entry index)
    stops: list              # TourStop sequence; stops[0] is the entry, 0 observations
    reward: float            # discounted return actually collected by the policy
    gamma: float

    def __post_init__(self):
        self.vertices = np.array([s.position for s in self.stops])
        segs = np.linalg.norm(np.diff(self.vertices, axis=0), axis=1) if len(self.stops) > 1 \
            else np.zeros(0)
        self.cum_lengths = np.concatenate(([0.0], np.cumsum(segs)))

    @property
    def length(self) -> float:
        return float(self.cum_lengths[-1])

    @property
    def n_observations(self) -> int:
        return int(sum(s.n_obs for s in self.stops))

    def position_at(self, ell: float) -> np.ndarray:
        """Position at arc length ell (piecewise linear, clamped to [0, L])."""
        ell = min(max(ell, 0.0), self.length)
        idx = int(np.searchsorted(self.cum_lengths, ell, side="right") - 1)
        if idx >= len(self.stops) - 1:
            return self.vertices[-1].copy()
        seg = self.cum_lengths[idx + 1] - self.cum_lengths[idx]
        if seg <= 0:
            return self.vertices[idx].copy()
        frac = (ell - self.cum_lengths[idx]) / seg
        return (1 - frac) * self.vertices[idx] + frac * self.vertices[idx + 1]

    @property
    def end_position(self) -> np.ndarray:
        return self.vertices[-1].copy()


@dataclass
class ClusterPolicy:
    """Greedy policy over reachable cluster states plus per-entry tour cache."""

    n_targets: int
    config: DpConfig
    reached_ids: np.ndarray
    values: np.ndarray
    actions: np.ndarray
    n_micro: int
    tours: dict
    residuals: list = field(default_factory=list)
    _tables: object = None
    _dense: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._dense:
            self._dense = {int(s): i for i, s in enumerate(self.reached_ids)}

    def _state_id(self, state: ClusterState) -> int:
        return state.visited * self.n_micro + self._tables.micro_index(state)

    def value_at(self, state: ClusterState) -> float:
        return float(self.values[self._dense[self._state_id(state)]])

    def action_at(self, state: ClusterState) -> int:
        return int(self.actions[self._dense[self._state_id(state)]])

    @property
    def n_reachable(self) -> int:
        return len(self.reached_ids)

    def tour(self, target_idx: int, entry_idx: int) -> Tour:
        return self.tours[(target_idx, entry_idx)]


def tour(policy: ClusterPolicy, entry: tuple) -> Tour:
    """Cached tour for an entry given as (target index, entry index)."""
    return policy.tours[tuple(entry)]


def solve_cluster(cluster: Cluster, config: DpConfig, m_max: int = 8) -> ClusterPolicy:
    """Exact value iteration over the reachable cluster states.

    Seeds are every entry state with the full visitation bitmask. Raises
    ClusterSizeError when the cluster exceeds ``m_max`` targets.
    """
    m = cluster.size
    if m > m_max:
        raise ClusterSizeError(f"cluster has {m} targets, limit is {m_max}")
    for target in cluster.targets:
        pc = target.policy.config
        if pc.gamma != config.gamma or pc.rho != config.rho:
            raise ParameterError(
                "cluster config must match the local policies' gamma and rho")
    if cluster._tables is None:
        precompute_rollouts(cluster)
    tables = cluster._tables
    n_micro = tables.n_micro
    full_mask = (1 << m) - 1

    seeds = np.array(sorted({full_mask * n_micro + tables.base[i][j]
                             for i in range(m) for j in range(len(cluster.entries[i]))}),
                     dtype=np.int64)

    # BFS over state ids = mask * n_micro + micro
    mask_clear = np.array([~(1 << i) for i in range(m)], dtype=np.int64)
    visited = np.zeros((full_mask + 1) * n_micro, dtype=bool)
    visited[seeds] = True
    frontier = seeds
    while frontier.size:
        masks = frontier // n_micro
        micros = frontier % n_micro
        cur = tables.micro_i[micros]
        cont_ids = masks * n_micro + tables.cont_next[micros]
        successors = [cont_ids]
        for ell in range(m):
            sw_ids = (masks & mask_clear[cur]) * n_micro + tables.switch_micro[ell, micros]
            successors.append(np.where(cur == ell, cont_ids, sw_ids))
        nxt = np.unique(np.concatenate(successors))
        nxt = nxt[~visited[nxt]]
        visited[nxt] = True
        frontier = nxt

    reached = np.flatnonzero(visited).astype(np.int64)
    masks = reached // n_micro
    micros = reached % n_micro
    cur = tables.micro_i[micros]
    bit_set = (masks >> cur) & 1

    next_dense = np.empty((reached.size, m), dtype=np.int64)
    rewards = np.empty((reached.size, m))
    cont_ids = masks * n_micro + tables.cont_next[micros]
    cont_rew = np.where(bit_set == 1, tables.cont_reward[micros],
                        -config.rho * tables.cont_travel[micros])
    for ell in range(m):
        sw_ids = (masks & mask_clear[cur]) * n_micro + tables.switch_micro[ell, micros]
        ids = np.where(cur == ell, cont_ids, sw_ids)
        next_dense[:, ell] = np.searchsorted(reached, ids)
        rewards[:, ell] = np.where(cur == ell, cont_rew,
                                   -config.rho * tables.switch_dist[ell, micros])

    values = np.zeros(reached.size)
    residuals = []
    converged = False
    for _ in range(config.max_sweeps):
        backed_up = rewards + config.gamma * values[next_dense]
        new_values = backed_up.max(axis=1)
        residual = float(np.abs(new_values - values).max())
        residuals.append(residual)
        values = new_values
        if residual < config.vi_tolerance:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"cluster value iteration did not reach tolerance {config.vi_tolerance:g} "
            f"within {config.max_sweeps} sweeps", residual=residuals[-1])

    actions = np.argmax(rewards + config.gamma * values[next_dense], axis=1).astype(np.int64)

    policy = ClusterPolicy(n_targets=m, config=config, reached_ids=reached,
                           values=values, actions=actions, n_micro=n_micro,
                           tours={}, residuals=residuals, _tables=tables)
    for i in range(m):
        for j in range(len(cluster.entries[i])):
            policy.tours[(i, j)] = _extract_tour(cluster, policy, i, j)
    return policy


def _extract_tour(cluster: Cluster, policy: ClusterPolicy, target_idx: int,
                  entry_idx: int) -> Tour:
    """Roll the greedy cluster policy out of one entry into a stop sequence.

    Continue steps move along the cached local rollout and observe at the new
    pose (consecutive observations at the same pose merge into a dwell count);
    switch steps append a travel stop at the next target's selected entry.
    Terminates at the policy's fixed point, or at any state revisit as a
    safety guard against zero-penalty switch loops.
    """
    tables = _tables(cluster)
    config = policy.config
    full_mask = (1 << cluster.size) - 1
    state = ClusterState(visited=full_mask, current=target_idx, entry=entry_idx, depth=0)

    stops = [TourStop(position=tuple(cluster.entry_position(target_idx, entry_idx)),
                      target=target_idx, n_obs=0)]
    total, discount = 0.0, 1.0
    seen = set()
    while state not in seen:
        seen.add(state)
        action = policy.action_at(state)
        nxt = transition(cluster, state, action)
        if nxt == state:
            break
        total += discount * cluster_reward(cluster, state, action, config)
        discount *= config.gamma
        if action == state.current:
            pos = tuple(tables.rollout_position(nxt))
            if stops and stops[-1].position == pos and stops[-1].target == nxt.current:
                stops[-1].n_obs += 1
            else:
                stops.append(TourStop(position=pos, target=nxt.current, n_obs=1))
        else:
            pos = tuple(cluster.entry_position(nxt.current, nxt.entry))
            stops.append(TourStop(position=pos, target=nxt.current, n_obs=0))
        state = nxt
    return Tour(entry=(target_idx, entry_idx), stops=stops, reward=total,
                gamma=config.gamma)


def policy_to_dict(policy: ClusterPolicy, cluster_id=None) -> dict:
    """JSON form: tours keyed by "target/entry" as position polylines with
    dwell counts, plus the dense value/action tables."""
    tours = {}
    for (i, j), t in sorted(policy.tours.items()):
        tours[f"{i}/{j}"] = {
            "entry": [i, j],
            "length": t.length,
            "reward": t.reward,
            "observations": t.n_observations,
            "stops": [{"position": list(map(float, s.position)),
                       "target": s.target, "dwell": s.n_obs} for s in t.stops],
        }
    return {
        "kind": "cluster_policy",
        "version": 1,
        "cluster_id": cluster_id,
        "n_targets": policy.n_targets,
        "config": policy.config.to_dict(),
        "n_micro": policy.n_micro,
        "reached_ids": np_to_list(policy.reached_ids),
        "values": np_to_list(policy.values),
        "actions": np_to_list(policy.actions),
        "tours": tours,
    }


def policy_from_dict(doc: dict, cluster: Cluster) -> ClusterPolicy:
    """Rebind a serialized policy to its (re-precomputed) cluster."""
    if doc.get("kind") != "cluster_policy":
        raise ParameterError("not a cluster policy document")
    if cluster._tables is None:
        precompute_rollouts(cluster)
    if cluster._tables.n_micro != int(doc["n_micro"]):
        raise ParameterError("policy was solved for a different cluster")
    tours = {}
    for payload in doc["tours"].values():
        i, j = payload["entry"]
        stops = [TourStop(position=tuple(s["position"]), target=int(s["target"]),
                          n_obs=int(s["dwell"])) for s in payload["stops"]]
        tours[(i, j)] = Tour(entry=(i, j), stops=stops, reward=float(payload["reward"]),
                             gamma=float(doc["config"]["gamma"]))
    return ClusterPolicy(
        n_targets=int(doc["n_targets"]), config=DpConfig(**doc["config"]),
        reached_ids=np.asarray(doc["reached_ids"], dtype=np.int64),
        values=np.asarray(doc["values"], dtype=float),
        actions=np.asarray(doc["actions"], dtype=np.int64),
        n_micro=int(doc["n_micro"]), tours=tours, _tables=cluster._tables)


def naive_product_state_count(cluster: Cluster) -> int:
    """Size of the direct-product formulation: all poses x all covariance grids."""
    total_poses = sum(len(t.workspace.poses) for t in cluster.targets)
    product = 1
    for t in cluster.targets:
        product *= len(t.grid)
    return total_poses * product


def hierarchical_state_count(cluster: Cluster) -> int:
    """Local state spaces solved independently plus the cluster table bound."""
    local = sum(len(t.workspace.poses) * len(t.grid) for t in cluster.targets)
    max_entries = max(len(e) for e in cluster.entries)
    if cluster.rollouts:
        max_k = max((r.K for rolls in cluster.rollouts for r in rolls), default=0)
    else:
        max_k = max(len(t.workspace.poses) * len(t.grid) for t in cluster.targets)
    m = cluster.size
    return local + (2 ** m) * m * max_entries * (1 + max_k)
