import numpy as np
import pytest

from covplan.covgrid import GridParams, assemble, project
from covplan.errors import ConvergenceError, ParameterError
from covplan.local_dp import (
    DpConfig,
    LocalState,
    Workspace,
    hull_boundary,
    policy_from_dict,
    policy_to_dict,
    reward,
    rollout,
    solve,
    step,
)
from covplan.sensing import Pose, RangeBearingModel
from covplan.workspaces import make_line_workspace, make_polar_workspace, make_shell_workspace

from conftest import entry_state


def finite_horizon_values(workspace, grid, sensor, target_mean, config, horizon):
    """Brute-force finite-horizon DP by memoized recursion over explicit states.

    Independent of the library's vectorized sweep: plain dicts, one state at a
    time, recursion on the remaining horizon.
    """
    n_actions = len(workspace.actions)
    cache = {}

    def value(state, steps_left):
        if steps_left == 0:
            return 0.0
        key = (state, steps_left)
        if key in cache:
            return cache[key]
        best = -np.inf
        for action in range(n_actions):
            nxt = step(workspace, grid, sensor, target_mean, state, action)
            r = reward(workspace, grid, state, nxt, action, config)
            best = max(best, r + config.gamma * value(nxt, steps_left - 1))
        cache[key] = best
        return best

    values, greedy = {}, {}
    for p in range(len(workspace.poses)):
        for c in range(len(grid)):
            state = LocalState(pose_idx=p, cov_idx=c)
            values[state] = value(state, horizon)
            q_values = []
            for action in range(n_actions):
                nxt = step(workspace, grid, sensor, target_mean, state, action)
                r = reward(workspace, grid, state, nxt, action, config)
                q_values.append(r + config.gamma * value(nxt, horizon - 1))
            greedy[state] = int(np.argmax(q_values))
    return values, greedy


class TestBoundary:
    def test_square_hull(self):
        positions = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        assert hull_boundary(positions) == (0, 1, 2, 3)

    def test_interior_point_excluded(self):
        positions = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0], [1.0, 1.0]])
        assert 4 not in hull_boundary(positions)

    def test_collinear_midpoints_on_edges_included(self):
        positions = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0],
                              [0.0, 2.0], [2.0, 2.0], [1.0, 1.0]])
        boundary = hull_boundary(positions)
        assert 1 in boundary and 5 not in boundary

    def test_degenerate_line(self):
        positions = np.array([[float(i), 0.0] for i in range(5)])
        assert hull_boundary(positions) == (0, 4)

    def test_polar_boundary_is_outer_ring_plus_sector_edges(self):
        full = make_polar_workspace(center=(0, 0), radii=[1.0, 2.0], angular_step_deg=45.0)
        outer = {i for i, p in enumerate(full.poses)
                 if abs(np.linalg.norm(p.position) - 2.0) < 1e-9}
        assert set(full.boundary) == outer

        sector = make_polar_workspace(center=(0, 0), radii=[1.0, 2.0],
                                      angular_step_deg=30.0, span_deg=90.0)
        positions = sector.positions
        for idx in range(len(sector.poses)):
            r = np.linalg.norm(positions[idx])
            theta = np.degrees(np.arctan2(positions[idx][1], positions[idx][0]))
            on_hull = idx in sector.boundary
            if abs(r - 2.0) < 1e-9 or abs(theta) < 1e-9 or abs(theta - 90.0) < 1e-9:
                assert on_hull
        # inner-arc interior poses are not entry points
        inner_mid = [i for i in range(len(sector.poses))
                     if abs(np.linalg.norm(positions[i]) - 1.0) < 1e-9
                     and 10 < np.degrees(np.arctan2(positions[i][1], positions[i][0])) < 80]
        assert all(i not in sector.boundary for i in inner_mid)

    def test_shell_boundary_is_outer_shell(self):
        # inner radius well inside the coarse hull of the sampled outer shell
        rng = np.random.default_rng(7)
        ws = make_shell_workspace(center=(0, 0, 0), radii=[1.0, 3.0], total_views=60, rng=rng)
        radii = np.linalg.norm(ws.positions, axis=1)
        assert set(ws.boundary) == set(np.flatnonzero(radii > 2.0).tolist())


class TestWorkspaceGenerators:
    def test_line_actions_clamp(self):
        ws = make_line_workspace(center=(0, 0), count=3, spacing=1.0, offset=2.0)
        stay, inward, outward = 0, 1, 2
        assert ws.transition[0, inward] == 0
        assert ws.transition[2, outward] == 2
        assert ws.transition[1, inward] == 0 and ws.transition[1, outward] == 2
        assert ws.travel_cost[stay] == 0.0
        assert ws.stationary_action == 0

    def test_polar_wraps_only_full_circle(self):
        full = make_polar_workspace(center=(0, 0), radii=[1.0], angular_step_deg=90.0)
        assert len(full.poses) == 4
        ccw = list(full.actions).index("ccw")
        assert full.transition[3, ccw] == 0
        sector = make_polar_workspace(center=(0, 0), radii=[1.0], angular_step_deg=45.0,
                                      span_deg=90.0)
        assert len(sector.poses) == 3
        assert sector.transition[2, list(sector.actions).index("ccw")] == 2

    def test_shell_counts(self):
        rng = np.random.default_rng(0)
        ws = make_shell_workspace(center=(0, 0, 0), radii=[2.0, 3.0, 4.0],
                                  total_views=17, rng=rng)
        assert len(ws.poses) == 17

    def test_workspace_validation(self):
        poses = [Pose(position=(0.0, 0.0)), Pose(position=(1.0, 0.0))]
        with pytest.raises(ParameterError):
            Workspace(poses=poses, actions=("stay",), transition=np.array([[0], [5]]),
                      travel_cost=np.array([0.0]))


class TestStep:
    def test_zero_cov_is_absorbing(self, toy_setup):
        workspace, grid, sensor, mean = toy_setup
        for action in range(len(workspace.actions)):
            state = LocalState(pose_idx=2, cov_idx=grid.zero_index)
            nxt = step(workspace, grid, sensor, mean, state, action)
            assert nxt.cov_idx == grid.zero_index

    def test_stationary_observation_reduces_trace(self, toy_setup):
        workspace, grid, sensor, mean = toy_setup
        state = entry_state(workspace, grid, np.eye(2) * grid.params.lambda_max * 0.9,
                            pose_idx=0)
        nxt = step(workspace, grid, sensor, mean, state, 0)
        assert nxt.pose_idx == state.pose_idx
        traces = grid.traces
        assert traces[nxt.cov_idx] <= traces[state.cov_idx]

    def test_two_pose_workspace_matches_manual_computation(self):
        from covplan.sensing import fuse, observation_cov

        mean = np.zeros(2)
        workspace = make_line_workspace(center=mean, count=2, spacing=3.0, offset=5.0)
        sensor = RangeBearingModel(sigma_radial=0.4, sigma_tangential=0.2,
                                   range_gain_radial=0.1)
        params = GridParams(dim=2, lambda_max=1.0, n_lambda=2, n_alpha=2,
                            n_dirs_max=2, kappa_lambda=3.0, kappa_alpha=2.0)
        grid = assemble(params, seed=1)
        start = LocalState(pose_idx=0, cov_idx=1)
        for action in range(3):
            got = step(workspace, grid, sensor, mean, start, action)
            new_pose = int(workspace.transition[0, action])
            q = observation_cov(sensor, mean, workspace.poses[new_pose])
            expected_cov = project(grid, fuse(grid.member(1), q))
            assert got == LocalState(pose_idx=new_pose, cov_idx=expected_cov)


class TestReward:
    def test_no_change_stationary_is_zero(self, toy_setup):
        workspace, grid, _, _ = toy_setup
        config = DpConfig(gamma=0.9, rho=0.5)
        state = LocalState(pose_idx=1, cov_idx=3)
        assert reward(workspace, grid, state, state, 0, config) == 0.0

    def test_rho_one_is_pure_travel_penalty(self, toy_setup):
        workspace, grid, _, _ = toy_setup
        config = DpConfig(gamma=0.9, rho=1.0)
        before = LocalState(pose_idx=1, cov_idx=3)
        after = LocalState(pose_idx=0, cov_idx=grid.zero_index)
        for action in range(len(workspace.actions)):
            assert reward(workspace, grid, before, after, action, config) == pytest.approx(
                -workspace.travel_cost[action])

    def test_rho_zero_is_sqrt_trace_reduction(self, toy_setup):
        workspace, grid, _, _ = toy_setup
        config = DpConfig(gamma=0.9, rho=0.0)
        before = LocalState(pose_idx=1, cov_idx=3)
        after = LocalState(pose_idx=0, cov_idx=grid.zero_index)
        expected = np.sqrt(np.trace(grid.member(3)))
        got = reward(workspace, grid, before, after, 2, config)
        assert got == pytest.approx(expected)
        assert got >= 0


class TestSolve:
    def test_matches_horizon50_bruteforce(self, toy_setup, toy_policy):
        workspace, grid, sensor, mean = toy_setup
        policy, config = toy_policy
        oracle_values, oracle_policy = finite_horizon_values(
            workspace, grid, sensor, mean, config, horizon=50)
        for state, v in oracle_values.items():
            assert policy.value_at(state) == pytest.approx(v, abs=1e-3)
            assert policy.action_at(state) == oracle_policy[state]

    def test_gamma_zero_is_myopic(self, toy_setup):
        workspace, grid, sensor, mean = toy_setup
        config = DpConfig(gamma=0.0, rho=0.3)
        policy = solve(workspace, grid, sensor, mean, config)
        for p in range(len(workspace.poses)):
            for c in range(len(grid)):
                state = LocalState(pose_idx=p, cov_idx=c)
                rewards = []
                for action in range(len(workspace.actions)):
                    nxt = step(workspace, grid, sensor, mean, state, action)
                    rewards.append(reward(workspace, grid, state, nxt, action, config))
                assert policy.action_at(state) == int(np.argmax(rewards))

    def test_single_pose_geometric_series(self):
        # one pose, stay only: value equals the discounted sum of the actual
        # per-step trace-reduction rewards until absorption
        mean = np.zeros(2)
        workspace = make_line_workspace(center=mean, count=1, spacing=1.0, offset=6.0)
        sensor = RangeBearingModel(sigma_radial=0.5, sigma_tangential=0.3)
        params = GridParams(dim=2, lambda_max=4.0, n_lambda=3, n_alpha=2,
                            n_dirs_max=2, kappa_lambda=4.0, kappa_alpha=2.0)
        grid = assemble(params, seed=2)
        config = DpConfig(gamma=0.8, rho=0.0, vi_tolerance=1e-12)
        policy = solve(workspace, grid, sensor, mean, config)

        state = LocalState(pose_idx=0, cov_idx=project(grid, 3.5 * np.eye(2)))
        expected, discount = 0.0, 1.0
        current = state
        for _ in range(policy.n_states + 1):
            nxt = step(workspace, grid, sensor, mean, current, 0)
            if nxt == current:
                break
            expected += discount * reward(workspace, grid, current, nxt, 0, config)
            discount *= config.gamma
            current = nxt
        assert policy.value_at(state) == pytest.approx(expected, abs=1e-6)

    def test_residuals_monotone_nonincreasing(self, toy_policy):
        policy, _ = toy_policy
        residuals = np.array(policy.residuals)
        assert np.all(residuals[1:] <= residuals[:-1] + 1e-12)

    def test_nonconvergence_raises_with_residual(self, toy_setup):
        workspace, grid, sensor, mean = toy_setup
        config = DpConfig(gamma=0.9, rho=0.3, vi_tolerance=1e-12, max_sweeps=3)
        with pytest.raises(ConvergenceError) as err:
            solve(workspace, grid, sensor, mean, config)
        assert err.value.residual > 0

    def test_reward_scaling_leaves_policy_unchanged(self, toy_setup):
        # scaling all rewards by a positive constant rescales values linearly
        # and leaves the greedy argmax (with its first-index tie rule) intact;
        # powers of two keep the float comparison exact
        from covplan.local_dp import transition_tables

        workspace, grid, sensor, mean = toy_setup
        config = DpConfig(gamma=0.9, rho=0.3, vi_tolerance=1e-12)
        next_state, gain = transition_tables(workspace, grid, sensor, mean)
        rewards = (1 - config.rho) * gain - config.rho * workspace.travel_cost[None, :]

        def solve_tables(r):
            values = np.zeros(r.shape[0])
            for _ in range(2000):
                new_values = (r + config.gamma * values[next_state]).max(axis=1)
                if np.abs(new_values - values).max() < config.vi_tolerance:
                    values = new_values
                    break
                values = new_values
            return np.argmax(r + config.gamma * values[next_state], axis=1)

        base = solve_tables(rewards)
        for scale in (2.0, 0.5, 8.0):
            np.testing.assert_array_equal(solve_tables(scale * rewards), base)

    def test_state_space_size(self, toy_setup):
        workspace, grid, _, _ = toy_setup
        from covplan.covgrid import expected_member_count

        n_expected = len(workspace.poses) * expected_member_count(grid.params)
        config = DpConfig(gamma=0.9, rho=0.3)
        policy = solve(workspace, grid, toy_setup[2], toy_setup[3], config)
        assert policy.n_states == n_expected


class TestRollout:
    def test_absorbing_start_has_zero_steps(self, toy_setup, toy_policy):
        workspace, grid, sensor, mean = toy_setup
        policy, _ = toy_policy
        # zero covariance + a pose whose policy action is stay: immediate fixed point
        for p in range(len(workspace.poses)):
            state = LocalState(pose_idx=p, cov_idx=grid.zero_index)
            if policy.action_at(state) == 0:
                result = rollout(policy, workspace, grid, sensor, state)
                assert result.K == 0 and result.actions == []
                return
        pytest.fail("no absorbing pose found")

    def test_every_entry_reaches_fixed_point_within_state_count(self, toy_setup, toy_policy):
        workspace, grid, sensor, mean = toy_setup
        policy, _ = toy_policy
        prior = 0.9 * grid.params.lambda_max * np.eye(2)
        for pose_idx in workspace.boundary:
            start = entry_state(workspace, grid, prior, pose_idx=pose_idx)
            result = rollout(policy, workspace, grid, sensor, start)
            assert result.fixed_point
            assert result.K <= policy.n_states

    def test_traces_nonincreasing_along_rollout(self, toy_setup, toy_policy):
        workspace, grid, sensor, _ = toy_setup
        policy, _ = toy_policy
        traces = grid.traces
        prior = 0.9 * grid.params.lambda_max * np.eye(2)
        for pose_idx in workspace.boundary:
            start = entry_state(workspace, grid, prior, pose_idx=pose_idx)
            result = rollout(policy, workspace, grid, sensor, start)
            covs = [traces[s.cov_idx] for s in result.states]
            for before, after in zip(covs, covs[1:]):
                assert after <= before + 1e-12

    def test_rollout_return_matches_value(self, toy_setup, toy_policy):
        workspace, grid, sensor, _ = toy_setup
        policy, config = toy_policy
        prior = 0.9 * grid.params.lambda_max * np.eye(2)
        v_max = np.abs(policy.values).max()
        for pose_idx in workspace.boundary:
            start = entry_state(workspace, grid, prior, pose_idx=pose_idx)
            result = rollout(policy, workspace, grid, sensor, start)
            got = result.discounted_return(config.gamma)
            slack = config.gamma ** result.K * v_max + 1e-6
            assert abs(got - policy.value_at(start)) <= slack


class TestShellStereoPipeline:
    def test_three_dimensional_solve_and_rollout(self):
        # concentric shells with a stereo sensor: the full 3-D planning path
        from covplan.covgrid import expected_member_count
        from covplan.sensing import StereoModel, StereoRig, lambda_max_bound

        mean = np.zeros(3)
        rng = np.random.default_rng(6)
        workspace = make_shell_workspace(center=mean, radii=[20.0, 30.0],
                                         total_views=30, rng=rng)
        rig = StereoRig(baseline=1.0, focal=731.0, resolution=(1024, 1024),
                        field_of_view=np.radians(70.0), pixel_cov=np.eye(3))
        sensor = StereoModel(rig=rig, dim=3)
        lam = lambda_max_bound(sensor, mean, workspace.poses)
        params = GridParams(dim=3, lambda_max=lam, n_lambda=4, n_alpha=2,
                            n_dirs_max=12, kappa_lambda=4.0, kappa_alpha=2.0)
        grid = assemble(params, seed=2)
        config = DpConfig(gamma=0.95, rho=0.01, vi_tolerance=1e-7)
        policy = solve(workspace, grid, sensor, mean, config)
        assert policy.n_states == len(workspace.poses) * expected_member_count(params)

        prior = 0.8 * lam * np.eye(3)
        for pose_idx in workspace.boundary[:5]:
            start = entry_state(workspace, grid, prior, pose_idx=pose_idx)
            result = rollout(policy, workspace, grid, sensor, start)
            assert result.fixed_point
            assert result.K <= policy.n_states


class TestSerialization:
    def test_policy_round_trip_and_hash_guard(self, toy_setup, toy_policy):
        workspace, grid, sensor, _ = toy_setup
        policy, _ = toy_policy
        doc = policy_to_dict(policy)
        restored = policy_from_dict(doc, workspace=workspace, grid=grid)
        np.testing.assert_array_equal(restored.actions, policy.actions)
        np.testing.assert_allclose(restored.values, policy.values)

        other = make_line_workspace(center=(5.0, 5.0), count=4, spacing=1.0, offset=3.0)
        with pytest.raises(ParameterError):
            policy_from_dict(doc, workspace=other)
