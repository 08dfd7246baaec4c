"""Shared fixtures: toy and desk-scale single-target setups."""

import numpy as np
import pytest

from covplan.covgrid import GridParams, assemble, project
from covplan.local_dp import DpConfig, LocalState, solve
from covplan.sensing import RangeBearingModel, lambda_max_bound
from covplan.workspaces import make_line_workspace, make_polar_workspace


def build_toy():
    """5-pose radial line, n = 2, tiny grid; the scale of the brute-force oracles."""
    target_mean = np.zeros(2)
    workspace = make_line_workspace(center=target_mean, count=5, spacing=2.0, offset=4.0)
    sensor = RangeBearingModel(sigma_radial=0.35, sigma_tangential=0.18,
                               range_gain_radial=0.16, range_gain_tangential=0.05)
    lam = lambda_max_bound(sensor, target_mean, workspace.poses)
    params = GridParams(dim=2, lambda_max=lam, n_lambda=3, n_alpha=2,
                        n_dirs_max=4, kappa_lambda=4.0, kappa_alpha=2.0)
    grid = assemble(params, seed=3)
    return workspace, grid, sensor, target_mean


def build_desk():
    """Polar-grid workspace at lab scale with a range-bearing sensor."""
    target_mean = np.zeros(2)
    workspace = make_polar_workspace(center=target_mean, radii=[4.0, 8.0, 12.0],
                                     angular_step_deg=45.0)
    sensor = RangeBearingModel(sigma_radial=0.3, sigma_tangential=0.12,
                               range_gain_radial=0.12, range_gain_tangential=0.04)
    lam = lambda_max_bound(sensor, target_mean, workspace.poses)
    params = GridParams(dim=2, lambda_max=lam, n_lambda=4, n_alpha=2,
                        n_dirs_max=6, kappa_lambda=5.0, kappa_alpha=2.0)
    grid = assemble(params, seed=5)
    return workspace, grid, sensor, target_mean


@pytest.fixture(scope="session")
def toy_setup():
    return build_toy()


@pytest.fixture(scope="session")
def desk_setup():
    return build_desk()


@pytest.fixture(scope="session")
def toy_policy(toy_setup):
    workspace, grid, sensor, mean = toy_setup
    config = DpConfig(gamma=0.9, rho=0.3, vi_tolerance=1e-9)
    return solve(workspace, grid, sensor, mean, config), config


def entry_state(workspace, grid, prior_cov, pose_idx=None):
    pose = workspace.boundary[0] if pose_idx is None else pose_idx
    return LocalState(pose_idx=pose, cov_idx=project(grid, prior_cov))
