"""Single-target dynamic program over pose x covariance states.

The state space is the product of a finite workspace and a covariance grid.
A transition applies the workspace move, then (if the target is visible from
the new pose and uncertainty remains) fuses one observation and projects the
result back onto the grid. The zero-covariance grid member is absorbing.
Value iteration is exact over the finite state space and the stationary
greedy policy is extracted with lowest-action-index tie-breaking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import covgrid, sensing
from .errors import ConvergenceError, CycleError, NotVisibleError, ParameterError
from .utils import content_hash, np_to_list

BOUNDARY_ATOL = 1e-9


def hull_boundary(positions: np.ndarray) -> tuple:
    """Indices of points lying on the convex hull boundary of a point cloud.

    Points on hull facets (not only vertices) count as boundary. Degenerate
    clouds (collinear, or coplanar in 3-D) fall back to the extreme points
    along the principal direction.
    """
    positions = np.asarray(positions, dtype=float)
    n = positions.shape[0]
    if n <= 2:
        return tuple(range(n))
    try:
        hull = ConvexHull(positions)
    except QhullError:
        centered = positions - positions.mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        coords = centered @ vt[0]
        lo, hi = coords.min(), coords.max()
        span = max(hi - lo, 1e-12)
        on_ends = np.flatnonzero((np.abs(coords - lo) < BOUNDARY_ATOL * span)
                                 | (np.abs(coords - hi) < BOUNDARY_ATOL * span))
        return tuple(int(i) for i in on_ends)
    scale = max(1.0, float(np.abs(positions).max()))
    values = positions @ hull.equations[:, :-1].T + hull.equations[:, -1]
    on_boundary = np.flatnonzero(np.max(values, axis=1) > -BOUNDARY_ATOL * scale)
    return tuple(int(i) for i in on_boundary)


@dataclass
class Workspace:
    """Finite pose set with deterministic action transitions.

    ``transition[p, a]`` is the pose index reached from pose p under action a;
    ``travel_cost[a]`` is the per-action travel penalty (0 for the stationary
    action). ``boundary`` holds the pose indices on the convex hull of the
    positions; these are the candidate entry points for cluster planning.
    """

    poses: list
    actions: tuple
    transition: np.ndarray
    travel_cost: np.ndarray
    boundary: tuple = ()

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.int64)
        self.travel_cost = np.asarray(self.travel_cost, dtype=float)
        n_poses, n_actions = len(self.poses), len(self.actions)
        if self.transition.shape != (n_poses, n_actions):
            raise ParameterError(
                f"transition table shape {self.transition.shape} does not match "
                f"{n_poses} poses x {n_actions} actions")
        if self.transition.min() < 0 or self.transition.max() >= n_poses:
            raise ParameterError("transition table contains out-of-range pose indices")
        if self.travel_cost.shape != (n_actions,) or self.travel_cost.min() < 0:
            raise ParameterError("travel costs must be nonnegative, one per action")
        if not self.boundary:
            self.boundary = hull_boundary(self.positions)
        if not self.boundary:
            raise ParameterError("workspace boundary is empty")

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.poses])

    @property
    def stationary_action(self):
        """Index of the zero-cost self-loop action, or None if configured off."""
        for a in range(len(self.actions)):
            if self.travel_cost[a] == 0 and np.all(self.transition[:, a] == np.arange(len(self.poses))):
                return a
        return None

    def content_hash(self) -> str:
        return content_hash({
            "positions": np_to_list(self.positions),
            "headings": [p.heading for p in self.poses],
            "actions": list(self.actions),
            "transition": np_to_list(self.transition),
            "travel_cost": np_to_list(self.travel_cost),
            "boundary": list(self.boundary),
        })


@dataclass(frozen=True)
class LocalState:
    pose_idx: int
    cov_idx: int


@dataclass(frozen=True)
class DpConfig:
    gamma: float
    rho: float
    vi_tolerance: float = 1e-6
    max_sweeps: int = 10_000

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ParameterError(f"gamma must be in [0, 1), got {self.gamma}")
        if not 0.0 <= self.rho <= 1.0:
            raise ParameterError(f"rho must be in [0, 1], got {self.rho}")
        if self.vi_tolerance <= 0 or self.max_sweeps < 1:
            raise ParameterError("vi_tolerance must be positive and max_sweeps >= 1")

    def to_dict(self) -> dict:
        return {"gamma": self.gamma, "rho": self.rho,
                "vi_tolerance": self.vi_tolerance, "max_sweeps": self.max_sweeps}


@dataclass
class LocalPolicy:
    """Stationary optimal policy: one value and one action per state.

    States are indexed pose-major: index = pose_idx * n_cov + cov_idx.
    """

    values: np.ndarray
    actions: np.ndarray
    target_mean: np.ndarray
    n_poses: int
    n_cov: int
    config: DpConfig
    workspace_hash: str
    grid_hash: str
    residuals: list = field(default_factory=list)

    def state_index(self, state: LocalState) -> int:
        return state.pose_idx * self.n_cov + state.cov_idx

    def action_at(self, state: LocalState) -> int:
        return int(self.actions[self.state_index(state)])

    def value_at(self, state: LocalState) -> float:
        return float(self.values[self.state_index(state)])

    @property
    def n_states(self) -> int:
        return self.n_poses * self.n_cov


def step(workspace: Workspace, grid, sensor, target_mean, state: LocalState,
         action: int) -> LocalState:
    """One joint transition: move, then observe-and-project from the new pose.

    A pose from which the target is not visible leaves the covariance
    unchanged, as does the absorbing zero-covariance member.
    """
    new_pose = int(workspace.transition[state.pose_idx, action])
    if state.cov_idx == grid.zero_index:
        return LocalState(pose_idx=new_pose, cov_idx=state.cov_idx)
    try:
        q = sensing.observation_cov(sensor, target_mean, workspace.poses[new_pose])
    except NotVisibleError:
        return LocalState(pose_idx=new_pose, cov_idx=state.cov_idx)
    fused = sensing.fuse(grid.member(state.cov_idx), q)
    return LocalState(pose_idx=new_pose, cov_idx=covgrid.project(grid, fused))


def reward(workspace: Workspace, grid, state_before: LocalState,
           state_after: LocalState, action: int, config: DpConfig) -> float:
    """(1 - rho) * sqrt(trace reduction) - rho * travel cost.

    Grid projection can round the fused covariance upward; such transitions
    are clamped to zero trace reduction and earn no uncertainty reward.
    """
    reduction = float(np.trace(grid.member(state_before.cov_idx))
                      - np.trace(grid.member(state_after.cov_idx)))
    reduction = max(reduction, 0.0)
    return ((1.0 - config.rho) * np.sqrt(reduction)
            - config.rho * float(workspace.travel_cost[action]))


def transition_tables(workspace: Workspace, grid, sensor, target_mean):
    """Dense next-state and reward tables for vectorized value iteration.

    Returns (next_state, reward) arrays of shape (n_states, n_actions) with
    pose-major state indexing; rewards exclude the rho weighting so callers
    can re-weight without re-projecting (see ``solve``).
    """
    n_poses, n_cov = len(workspace.poses), len(grid)
    n_actions = len(workspace.actions)
    traces = grid.traces

    # observation covariance per pose; None when the target is not visible
    q_per_pose = []
    for pose in workspace.poses:
        try:
            q_per_pose.append(sensing.observation_cov(sensor, target_mean, pose))
        except NotVisibleError:
            q_per_pose.append(None)

    # covariance successor and sqrt trace reduction per (cov member, observing pose)
    cov_next = np.empty((n_cov, n_poses), dtype=np.int64)
    sqrt_red = np.zeros((n_cov, n_poses))
    cov_next[grid.zero_index, :] = grid.zero_index
    for c in range(n_cov):
        if c == grid.zero_index:
            continue
        member = grid.member(c)
        for p, q in enumerate(q_per_pose):
            if q is None:
                cov_next[c, p] = c
                continue
            nxt = covgrid.project(grid, sensing.fuse(member, q))
            cov_next[c, p] = nxt
            sqrt_red[c, p] = np.sqrt(max(traces[c] - traces[nxt], 0.0))

    pose_next = workspace.transition  # (n_poses, n_actions)
    # state index = pose * n_cov + cov
    next_state = np.empty((n_poses * n_cov, n_actions), dtype=np.int64)
    gain = np.empty((n_poses * n_cov, n_actions))
    for a in range(n_actions):
        p_new = pose_next[:, a]       # (n_poses,)
        c_new = cov_next[:, p_new].T  # [p, c] = cov successor when observing from p_new[p]
        next_state[:, a] = (p_new[:, None] * n_cov + c_new).reshape(-1)
        gain[:, a] = sqrt_red[:, p_new].T.reshape(-1)
    return next_state, gain


def solve(workspace: Workspace, grid, sensor, target_mean,
          config: DpConfig) -> LocalPolicy:
    """Exact value iteration to a sup-norm Bellman residual below tolerance."""
    next_state, gain = transition_tables(workspace, grid, sensor, target_mean)
    rewards = (1.0 - config.rho) * gain - config.rho * workspace.travel_cost[None, :]

    values = np.zeros(next_state.shape[0])
    residuals = []
    converged = False
    for _ in range(config.max_sweeps):
        backed_up = rewards + config.gamma * values[next_state]
        new_values = backed_up.max(axis=1)
        residual = float(np.abs(new_values - values).max())
        residuals.append(residual)
        values = new_values
        if residual < config.vi_tolerance:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"value iteration did not reach tolerance {config.vi_tolerance:g} "
            f"within {config.max_sweeps} sweeps", residual=residuals[-1])

    greedy = rewards + config.gamma * values[next_state]
    actions = np.argmax(greedy, axis=1).astype(np.int64)  # first max = lowest index
    return LocalPolicy(values=values, actions=actions,
                       target_mean=np.asarray(target_mean, dtype=float),
                       n_poses=len(workspace.poses), n_cov=len(grid), config=config,
                       workspace_hash=workspace.content_hash(),
                       grid_hash=grid.content_hash(), residuals=residuals)


@dataclass
class Rollout:
    """Trajectory of the stationary policy up to its fixed point.

    ``states`` has K + 1 entries; ``actions`` and ``rewards`` have K, where K
    is the first step index at which the state stops changing.
    """

    states: list
    actions: list
    rewards: list
    fixed_point: bool

    @property
    def K(self) -> int:
        return len(self.actions)

    def positions(self, workspace: Workspace) -> np.ndarray:
        return np.array([workspace.poses[s.pose_idx].position for s in self.states])

    def discounted_return(self, gamma: float) -> float:
        return float(sum(r * gamma ** k for k, r in enumerate(self.rewards)))


def rollout(policy: LocalPolicy, workspace: Workspace, grid, sensor,
            start: LocalState, max_steps=None) -> Rollout:
    """Apply the policy from ``start`` until the state repeats.

    An immediate repeat is the expected absorbing fixed point; a revisit of an
    earlier state is a cycle, which an exactly optimal policy cannot produce,
    and raises CycleError as a diagnostic.
    """
    if max_steps is None:
        max_steps = policy.n_states
    states = [start]
    actions, rewards = [], []
    seen = {start: 0}
    current = start
    for _ in range(max_steps):
        action = policy.action_at(current)
        nxt = step(workspace, grid, sensor, policy.target_mean, current, action)
        if nxt == current:
            return Rollout(states=states, actions=actions, rewards=rewards,
                           fixed_point=True)
        if nxt in seen:
            raise CycleError(
                f"policy rollout revisited state {nxt} first seen at step {seen[nxt]}")
        rewards.append(reward(workspace, grid, current, nxt, action, policy.config))
        actions.append(action)
        states.append(nxt)
        seen[nxt] = len(states) - 1
        current = nxt
    return Rollout(states=states, actions=actions, rewards=rewards, fixed_point=False)


# ---------------------------------------------------------------------------
# Serialization


def policy_to_dict(policy: LocalPolicy) -> dict:
    return {
        "kind": "local_policy",
        "version": 1,
        "workspace_hash": policy.workspace_hash,
        "grid_hash": policy.grid_hash,
        "config": policy.config.to_dict(),
        "target_mean": np_to_list(policy.target_mean),
        "n_poses": policy.n_poses,
        "n_cov": policy.n_cov,
        "values": np_to_list(policy.values),
        "actions": np_to_list(policy.actions),
    }


def policy_from_dict(doc: dict, workspace: Workspace = None, grid=None) -> LocalPolicy:
    if doc.get("kind") != "local_policy":
        raise ParameterError("not a local policy document")
    if workspace is not None and workspace.content_hash() != doc["workspace_hash"]:
        raise ParameterError("policy was solved for a different workspace")
    if grid is not None and grid.content_hash() != doc["grid_hash"]:
        raise ParameterError("policy was solved for a different covariance grid")
    return LocalPolicy(
        values=np.asarray(doc["values"], dtype=float),
        actions=np.asarray(doc["actions"], dtype=np.int64),
        target_mean=np.asarray(doc["target_mean"], dtype=float),
        n_poses=int(doc["n_poses"]), n_cov=int(doc["n_cov"]),
        config=DpConfig(**doc["config"]),
        workspace_hash=doc["workspace_hash"], grid_hash=doc["grid_hash"])


def save_policy(policy: LocalPolicy, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(policy_to_dict(policy), fh)


def load_policy(path, workspace: Workspace = None, grid=None) -> LocalPolicy:
    with open(path, "r", encoding="utf-8") as fh:
        return policy_from_dict(json.load(fh), workspace=workspace, grid=grid)
