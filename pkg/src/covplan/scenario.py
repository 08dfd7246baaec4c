"""Scenario files: schema, validation, and expansion into planner objects.

A scenario is a single JSON document holding the target priors, a workspace
generator spec (shared or per target), the sensor model, grid and DP
parameters, the fleet setup, and simulation settings. Validation failures
carry a JSON-pointer to the offending field. All defaults are materialized by
``resolved_config`` so a run's full configuration is always printable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .covgrid import GridParams
from .errors import ScenarioError
from .local_dp import DpConfig
from .sensing import RangeBearingModel, StereoModel, StereoRig, TargetBelief, lambda_max_bound
from .utils import check_sym_psd, np_to_list, substream
from .workspaces import make_line_workspace, make_polar_workspace, make_shell_workspace

SCHEMA_VERSION = 1

GRID_DEFAULTS = {
    "lambda_max": None,
    "n_lambda": 4,
    "n_alpha": 2,
    "n_dirs_max": 8,
    "kappa_lambda": 3.2,
    "kappa_alpha": 2.0,
    "charge_iters": 2000,
    "charge_step": 1.0,
}

DP_DEFAULTS = {
    "gamma": 0.9,
    "rho": 0.02,
    "vi_tolerance": 1e-6,
    "max_sweeps": 10_000,
}

FLEET_DEFAULTS = {
    "n_robots": 1,
    "starts": None,
    "depot": None,
    "comm_range": 1000.0,
    "delta_ell": None,
    "m_max": 8,
    "comm_every": 1,
    "stall_factor": 10.0,
}

SIM_DEFAULTS = {
    "noise": "model",
    "truth": "prior_mean",
    "repetitions": 100,
    "entry": {"target": 0, "index": 0},
    "baseline_horizon": 200,
    "rho_values": [0.01, 0.05, 0.2, 0.5, 0.9],
}


def _require(doc, key, pointer, kind=None):
    if key not in doc:
        raise ScenarioError(f"missing required field '{key}'", pointer=f"{pointer}/{key}")
    value = doc[key]
    if kind is not None and not isinstance(value, kind):
        names = kind if isinstance(kind, tuple) else (kind,)
        raise ScenarioError(
            f"field '{key}' must be {'/'.join(k.__name__ for k in names)}",
            pointer=f"{pointer}/{key}")
    return value


def _merged(defaults, given, pointer):
    unknown = set(given) - set(defaults)
    if unknown:
        raise ScenarioError(f"unknown fields {sorted(unknown)}", pointer=pointer)
    out = dict(defaults)
    out.update(given)
    return out


@dataclass
class TargetSpec:
    mean: np.ndarray
    cov: np.ndarray = None     # explicit prior covariance
    cov_scale: float = None    # or scale * lambda_max * I, resolved per target


@dataclass
class Scenario:
    seed: int
    targets: list
    workspace_specs: list      # one dict per target
    sensor_spec: dict
    grid_spec: dict
    dp: DpConfig
    fleet_spec: dict
    sim_spec: dict
    source: dict = field(default_factory=dict, repr=False)

    @property
    def n_targets(self) -> int:
        return len(self.targets)

    @property
    def dim(self) -> int:
        return int(self.targets[0].mean.shape[0])


def scenario_from_dict(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario document must be a JSON object", pointer="/")
    version = _require(doc, "version", "", int)
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"unsupported scenario version {version}", pointer="/version")
    seed = _require(doc, "seed", "", int)

    raw_targets = _require(doc, "targets", "", list)
    if not raw_targets:
        raise ScenarioError("at least one target required", pointer="/targets")
    targets = []
    dim = None
    for i, entry in enumerate(raw_targets):
        pointer = f"/targets/{i}"
        mean = np.asarray(_require(entry, "mean", pointer, list), dtype=float)
        if mean.ndim != 1 or mean.shape[0] not in (2, 3):
            raise ScenarioError("mean must be a 2-D or 3-D vector", pointer=f"{pointer}/mean")
        if dim is None:
            dim = mean.shape[0]
        elif mean.shape[0] != dim:
            raise ScenarioError("all targets must share one dimension", pointer=f"{pointer}/mean")
        cov = entry.get("cov")
        cov_scale = entry.get("cov_scale")
        if (cov is None) == (cov_scale is None):
            raise ScenarioError("exactly one of 'cov' or 'cov_scale' required", pointer=pointer)
        if cov is not None:
            try:
                cov = check_sym_psd(np.asarray(cov, dtype=float), "cov")
            except Exception as exc:
                raise ScenarioError(str(exc), pointer=f"{pointer}/cov") from None
            if cov.shape[0] != mean.shape[0]:
                raise ScenarioError("cov dimension mismatch", pointer=f"{pointer}/cov")
        targets.append(TargetSpec(mean=mean, cov=cov,
                                  cov_scale=None if cov_scale is None else float(cov_scale)))

    if "workspaces" in doc:
        specs = _require(doc, "workspaces", "", list)
        if len(specs) != len(targets):
            raise ScenarioError("need one workspace spec per target", pointer="/workspaces")
        workspace_specs = [_validated_workspace(s, f"/workspaces/{i}")
                           for i, s in enumerate(specs)]
    else:
        shared = _require(doc, "workspace", "", dict)
        spec = _validated_workspace(shared, "/workspace")
        workspace_specs = [dict(spec) for _ in targets]

    sensor_spec = _validated_sensor(_require(doc, "sensor", "", dict), "/sensor", dim)
    grid_spec = _merged(GRID_DEFAULTS, doc.get("grid", {}), "/grid")
    dp = _validated_dp(_merged(DP_DEFAULTS, doc.get("dp", {}), "/dp"))
    fleet_spec = _merged(FLEET_DEFAULTS, doc.get("fleet", {}), "/fleet")
    sim_spec = _merged(SIM_DEFAULTS, doc.get("sim", {}), "/sim")
    if sim_spec["noise"] not in ("model", "none"):
        raise ScenarioError("sim.noise must be 'model' or 'none'", pointer="/sim/noise")
    if sim_spec["truth"] not in ("prior_mean", "sample"):
        raise ScenarioError("sim.truth must be 'prior_mean' or 'sample'", pointer="/sim/truth")

    return Scenario(seed=seed, targets=targets, workspace_specs=workspace_specs,
                    sensor_spec=sensor_spec, grid_spec=grid_spec, dp=dp,
                    fleet_spec=fleet_spec, sim_spec=sim_spec, source=doc)


def load_scenario(path) -> Scenario:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"scenario file is not valid JSON: {exc}") from None
    return scenario_from_dict(doc)


WORKSPACE_FIELDS = {
    "line": {"type", "count", "spacing", "offset", "direction"},
    "polar": {"type", "radii", "angular_step_deg", "span_deg", "start_deg"},
    "shell": {"type", "radii", "total_views"},
}


def _validated_workspace(spec: dict, pointer: str) -> dict:
    kind = _require(spec, "type", pointer, str)
    if kind not in WORKSPACE_FIELDS:
        raise ScenarioError(f"unknown workspace type '{kind}'", pointer=f"{pointer}/type")
    unknown = set(spec) - WORKSPACE_FIELDS[kind]
    if unknown:
        raise ScenarioError(f"unknown fields {sorted(unknown)}", pointer=pointer)
    if kind in ("polar", "shell"):
        _require(spec, "radii", pointer, (list, dict))
    if kind == "shell":
        _require(spec, "total_views", pointer, int)
    return dict(spec)


def _expand_radii(radii):
    if isinstance(radii, dict):
        return list(np.linspace(radii["min"], radii["max"], int(radii["count"])))
    return [float(r) for r in radii]


def build_workspace(spec: dict, center, rng):
    kind = spec["type"]
    if kind == "line":
        return make_line_workspace(
            center=center,
            direction=tuple(spec.get("direction", (1.0, 0.0))),
            count=int(spec.get("count", 5)),
            spacing=float(spec.get("spacing", 2.0)),
            offset=float(spec.get("offset", 10.0)))
    if kind == "polar":
        return make_polar_workspace(
            center=center,
            radii=_expand_radii(spec["radii"]),
            angular_step_deg=float(spec.get("angular_step_deg", 15.0)),
            span_deg=float(spec.get("span_deg", 360.0)),
            start_deg=float(spec.get("start_deg", 0.0)))
    if kind == "shell":
        return make_shell_workspace(
            center=center,
            radii=_expand_radii(spec["radii"]),
            total_views=int(spec["total_views"]),
            rng=rng)
    raise ScenarioError(f"unknown workspace type '{kind}'")


SENSOR_FIELDS = {
    "range_bearing": {"type", "sigma_radial", "sigma_tangential", "range_gain_radial",
                      "range_gain_tangential", "max_range"},
    "stereo": {"type", "baseline", "focal", "resolution", "fov_deg", "pixel_cov",
               "quantize", "min_disparity"},
}


def _validated_sensor(spec: dict, pointer: str, dim: int) -> dict:
    kind = _require(spec, "type", pointer, str)
    if kind not in SENSOR_FIELDS:
        raise ScenarioError(f"unknown sensor type '{kind}'", pointer=f"{pointer}/type")
    unknown = set(spec) - SENSOR_FIELDS[kind]
    if unknown:
        raise ScenarioError(f"unknown fields {sorted(unknown)}", pointer=pointer)
    if kind == "stereo":
        for key in ("baseline", "focal"):
            _require(spec, key, pointer, (int, float))
    out = dict(spec)
    out["dim"] = dim
    return out


def build_sensor(spec: dict):
    kind = spec["type"]
    if kind == "range_bearing":
        return RangeBearingModel(
            sigma_radial=float(spec.get("sigma_radial", 0.1)),
            sigma_tangential=float(spec.get("sigma_tangential", 0.05)),
            range_gain_radial=float(spec.get("range_gain_radial", 0.05)),
            range_gain_tangential=float(spec.get("range_gain_tangential", 0.02)),
            max_range=float(spec.get("max_range", np.inf)),
            dim=int(spec["dim"]))
    if kind == "stereo":
        pixel_cov = spec.get("pixel_cov", 1.0)
        if isinstance(pixel_cov, (int, float)):
            pixel_cov = float(pixel_cov) * np.eye(3)
        else:
            pixel_cov = np.asarray(pixel_cov, dtype=float)
        rig = StereoRig(
            baseline=float(spec["baseline"]),
            focal=float(spec["focal"]),
            resolution=tuple(spec.get("resolution", (1024, 1024))),
            field_of_view=np.radians(float(spec.get("fov_deg", 70.0))),
            pixel_cov=pixel_cov)
        return StereoModel(rig=rig, dim=int(spec["dim"]),
                           quantize=bool(spec.get("quantize", False)),
                           min_disparity=float(spec.get("min_disparity", 1.0)))
    raise ScenarioError(f"unknown sensor type '{kind}'")


def _validated_dp(merged: dict) -> DpConfig:
    try:
        return DpConfig(gamma=float(merged["gamma"]), rho=float(merged["rho"]),
                        vi_tolerance=float(merged["vi_tolerance"]),
                        max_sweeps=int(merged["max_sweeps"]))
    except Exception as exc:
        raise ScenarioError(str(exc), pointer="/dp") from None


@dataclass
class TargetAssets:
    """Expanded per-target planning objects."""

    belief: TargetBelief
    workspace: object
    grid_params: GridParams
    sensor: object


def expand_target(scenario: Scenario, index: int) -> TargetAssets:
    """Materialize one target's workspace, sensor, prior, and grid parameters.

    Workspace randomness (shell viewpoints) flows from the scenario seed
    through a per-target substream; ``lambda_max`` defaults to the largest
    observation covariance trace over the workspace.
    """
    spec = scenario.targets[index]
    rng = substream(scenario.seed, "workspace", str(index))
    workspace = build_workspace(scenario.workspace_specs[index], spec.mean, rng)
    sensor = build_sensor(scenario.sensor_spec)
    lam = scenario.grid_spec["lambda_max"]
    if lam is None:
        lam = lambda_max_bound(sensor, spec.mean, workspace.poses)
    params = GridParams(dim=scenario.dim, lambda_max=float(lam),
                        n_lambda=int(scenario.grid_spec["n_lambda"]),
                        n_alpha=int(scenario.grid_spec["n_alpha"]),
                        n_dirs_max=int(scenario.grid_spec["n_dirs_max"]),
                        kappa_lambda=float(scenario.grid_spec["kappa_lambda"]),
                        kappa_alpha=float(scenario.grid_spec["kappa_alpha"]),
                        charge_iters=int(scenario.grid_spec["charge_iters"]),
                        charge_step=float(scenario.grid_spec["charge_step"]))
    cov = spec.cov if spec.cov is not None else spec.cov_scale * lam * np.eye(scenario.dim)
    belief = TargetBelief(mean=spec.mean.copy(), cov=cov)
    return TargetAssets(belief=belief, workspace=workspace, grid_params=params,
                        sensor=sensor)


def fleet_starts(scenario: Scenario):
    starts = scenario.fleet_spec["starts"]
    n = int(scenario.fleet_spec["n_robots"])
    if starts is None:
        # default: robots in a row south-west of the scene
        base = np.min(np.vstack([t.mean for t in scenario.targets]), axis=0)
        starts = [base - 10.0 + np.array([5.0 * i] + [0.0] * (scenario.dim - 1))
                  for i in range(n)]
    else:
        starts = [np.asarray(s, dtype=float) for s in starts]
        if len(starts) != n:
            raise ScenarioError("fleet.starts length must equal fleet.n_robots",
                                pointer="/fleet/starts")
    return starts


def fleet_depot(scenario: Scenario):
    depot = scenario.fleet_spec["depot"]
    if depot is None:
        return np.asarray(fleet_starts(scenario)[0], dtype=float)
    return np.asarray(depot, dtype=float)


def resolved_config(scenario: Scenario) -> dict:
    """The full configuration with every default filled in (for --print-config)."""
    return np_to_list({
        "version": SCHEMA_VERSION,
        "seed": scenario.seed,
        "targets": [
            {"mean": t.mean, "cov": t.cov, "cov_scale": t.cov_scale}
            for t in scenario.targets
        ],
        "workspaces": scenario.workspace_specs,
        "sensor": scenario.sensor_spec,
        "grid": scenario.grid_spec,
        "dp": scenario.dp.to_dict(),
        "fleet": {**scenario.fleet_spec,
                  "starts": [list(map(float, s)) for s in fleet_starts(scenario)],
                  "depot": list(map(float, fleet_depot(scenario)))},
        "sim": scenario.sim_spec,
    })
