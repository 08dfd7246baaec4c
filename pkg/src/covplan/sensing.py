"""Sensor models, Kalman fusion, and the stereo-vision noise pipeline.

Two observation models are provided. ``StereoModel`` follows the physics of a
stereo rig: a world target is projected to ideal pixel coordinates, the pixel
covariance is pushed through the triangulation Jacobian, and the result is
rotated into the world frame (truncated to the planning dimension when the
planner works in 2-D). ``RangeBearingModel`` is a closed-form synthetic model
whose noise grows with range; it keeps planner tests independent of stereo
geometry.

Models are immutable and their operations pure; simulation draws come from an
externally supplied generator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, NotVisibleError, ParameterError, TrainingError
from .utils import check_sym_pd, check_sym_psd, wrap_angle


@dataclass(frozen=True)
class Pose:
    """A sensor placement: position in R^2 or R^3 plus a heading angle.

    The heading is bookkeeping for workspace generators; the observation
    models aim the sensor at the target estimate (servo convention), so only
    the position enters the noise geometry.
    """

    position: tuple
    heading: float = 0.0

    def __post_init__(self):
        pos = tuple(float(x) for x in self.position)
        if len(pos) not in (2, 3):
            raise ParameterError(f"pose position must be 2-D or 3-D, got {len(pos)}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "heading", wrap_angle(self.heading))

    @property
    def xyz(self) -> np.ndarray:
        """Position embedded in R^3 (z = 0 for planar poses)."""
        if len(self.position) == 3:
            return np.array(self.position)
        return np.array([self.position[0], self.position[1], 0.0])


@dataclass
class TargetBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = check_sym_psd(np.asarray(self.cov, dtype=float), "cov")
        if self.cov.shape[0] != self.mean.shape[0]:
            raise ParameterError("mean and covariance dimensions disagree")


def _embed3(vec: np.ndarray) -> np.ndarray:
    vec = np.asarray(vec, dtype=float)
    if vec.shape[0] == 3:
        return vec
    return np.array([vec[0], vec[1], 0.0])


def aim_rotation(camera_pos3: np.ndarray, target_pos3: np.ndarray) -> np.ndarray:
    """Camera-to-world rotation with the optical axis pointing at the target.

    Columns are the camera axes in world coordinates: x lateral, y vertical
    (pixel-down direction maps to world z for planar scenes), z forward.
    """
    forward = target_pos3 - camera_pos3
    dist = np.linalg.norm(forward)
    if dist < 1e-12:
        raise GeometryError("camera placed on top of the target")
    forward = forward / dist
    up_hint = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up_hint) > 1.0 - 1e-9:
        up_hint = np.array([1.0, 0.0, 0.0])
    lateral = np.cross(up_hint, forward)
    lateral /= np.linalg.norm(lateral)
    vertical = np.cross(forward, lateral)
    return np.column_stack([lateral, vertical, forward])


# ---------------------------------------------------------------------------
# Stereo rig geometry


@dataclass(frozen=True)
class StereoRig:
    """Stereo camera pair: baseline b, focal length f (pixels), image size,
    field of view, pixel covariance for (x_L, x_R, y), and a fixed mount
    transform from the camera frame to the world frame."""

    baseline: float
    focal: float
    resolution: tuple = (1024, 1024)
    field_of_view: float = np.radians(70.0)
    pixel_cov: np.ndarray = field(default_factory=lambda: np.eye(3))
    mount_rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    mount_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.baseline <= 0 or self.focal <= 0:
            raise ParameterError("baseline and focal length must be positive")
        object.__setattr__(self, "pixel_cov",
                           check_sym_psd(np.asarray(self.pixel_cov, dtype=float), "pixel_cov"))
        object.__setattr__(self, "mount_rotation", np.asarray(self.mount_rotation, dtype=float))
        object.__setattr__(self, "mount_translation", np.asarray(self.mount_translation, dtype=float))


def triangulate(rig: StereoRig, pixels) -> np.ndarray:
    """Camera-frame point (b/d) * [(x_L + x_R)/2, y, f] for disparity d = x_L - x_R."""
    x_l, x_r, y = (float(v) for v in pixels)
    disparity = x_l - x_r
    if disparity <= 0:
        raise GeometryError(f"non-positive disparity {disparity:g}")
    return (rig.baseline / disparity) * np.array([0.5 * (x_l + x_r), y, rig.focal])


def stereo_jacobian(rig: StereoRig, pixels) -> np.ndarray:
    """Analytic Jacobian of ``triangulate`` with respect to (x_L, x_R, y)."""
    x_l, x_r, y = (float(v) for v in pixels)
    d = x_l - x_r
    if d <= 0:
        raise GeometryError(f"non-positive disparity {d:g}")
    b = rig.baseline
    s = x_l + x_r
    return np.array([
        [0.5 * b * (d - s) / d ** 2, 0.5 * b * (d + s) / d ** 2, 0.0],
        [-b * y / d ** 2, b * y / d ** 2, b / d],
        [-b * rig.focal / d ** 2, b * rig.focal / d ** 2, 0.0],
    ])


def stereo_cov(rig: StereoRig, pixels) -> np.ndarray:
    """World-frame triangulation covariance T J P J^T T^T."""
    jac = stereo_jacobian(rig, pixels)
    rot = rig.mount_rotation
    cov = rot @ jac @ rig.pixel_cov @ jac.T @ rot.T
    return 0.5 * (cov + cov.T)


def project_pixels(rig: StereoRig, point_cam: np.ndarray) -> np.ndarray:
    """Ideal pixel coordinates (x_L, x_R, y) of a camera-frame point (inverse
    of ``triangulate``); requires positive depth."""
    x, y, z = (float(v) for v in point_cam)
    if z <= 0:
        raise GeometryError(f"point behind the camera (z = {z:g})")
    half = 0.5 * rig.baseline
    return np.array([
        rig.focal * (x + half) / z,
        rig.focal * (x - half) / z,
        rig.focal * y / z,
    ])


# ---------------------------------------------------------------------------
# Planner-facing observation models


@dataclass(frozen=True)
class StereoModel:
    """Stereo observation model for planning in ``dim`` dimensions.

    The camera always aims at the estimate it observes; a target is visible if
    it lies inside the field-of-view cone and its disparity is at least
    ``min_disparity`` pixels. When ``quantize`` is set, simulated observations
    round ideal pixels to the image grid instead of drawing pixel noise, which
    makes repeated same-pose observations identical and exposes triangulation
    bias.
    """

    rig: StereoRig
    dim: int = 2
    quantize: bool = False
    min_disparity: float = 1.0

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ParameterError("planning dimension must be 2 or 3")

    def _camera_frame(self, aim_point, pose: Pose):
        rot = aim_rotation(pose.xyz, _embed3(aim_point))
        return rot

    def _check_visible(self, point3, pose: Pose, rot) -> np.ndarray:
        rel = point3 - pose.xyz
        dist = np.linalg.norm(rel)
        if dist < 1e-12:
            raise NotVisibleError("target coincides with the sensor")
        depth = rel @ rot[:, 2]
        if depth <= 0:
            raise NotVisibleError("target behind the camera")
        if depth < dist * np.cos(0.5 * self.rig.field_of_view):
            raise NotVisibleError("target outside the field-of-view cone")
        disparity = self.rig.focal * self.rig.baseline / depth
        if disparity < self.min_disparity:
            raise NotVisibleError(
                f"disparity {disparity:.3g} px below minimum {self.min_disparity:g}")
        return rot.T @ rel

    def observation_cov(self, target_mean, pose: Pose) -> np.ndarray:
        mean3 = _embed3(target_mean)
        rot = self._camera_frame(mean3, pose)
        point_cam = self._check_visible(mean3, pose, rot)
        pixels = project_pixels(self.rig, point_cam)
        jac = stereo_jacobian(self.rig, pixels)
        cov3 = rot @ jac @ self.rig.pixel_cov @ jac.T @ rot.T
        cov3 = 0.5 * (cov3 + cov3.T)
        return cov3[: self.dim, : self.dim].copy()

    def simulate(self, target_truth, pose: Pose, rng, mean=None):
        """One simulated observation of the true target from ``pose``.

        The camera aims at the planner's mean (defaults to the truth); the
        returned covariance is the model Q at that mean. Without quantization
        the pixel error is a draw from the rig's pixel covariance.
        """
        mean_vec = np.asarray(target_truth if mean is None else mean, dtype=float)
        truth3 = _embed3(target_truth)
        rot = self._camera_frame(_embed3(mean_vec), pose)
        point_cam = self._check_visible(truth3, pose, rot)
        pixels = project_pixels(self.rig, point_cam)
        if self.quantize:
            pixels = np.round(pixels)
        elif np.any(self.rig.pixel_cov):
            pixels = pixels + np.linalg.cholesky(
                self.rig.pixel_cov + 1e-300 * np.eye(3)) @ rng.standard_normal(3)
        if pixels[0] - pixels[1] <= 0:
            raise NotVisibleError("observed disparity collapsed to zero")
        observed_cam = triangulate(self.rig, pixels)
        observed3 = rot @ observed_cam + pose.xyz
        value = observed3[: self.dim].copy()
        return value, self.observation_cov(mean_vec, pose)


@dataclass(frozen=True)
class RangeBearingModel:
    """Synthetic closed-form model: noise grows with range, radial vs
    tangential standard deviations differ, visibility is a max-range cut."""

    sigma_radial: float = 0.1
    sigma_tangential: float = 0.05
    range_gain_radial: float = 0.05
    range_gain_tangential: float = 0.02
    max_range: float = np.inf
    dim: int = 2

    def __post_init__(self):
        if min(self.sigma_radial, self.sigma_tangential) <= 0:
            raise ParameterError("base standard deviations must be positive")
        if min(self.range_gain_radial, self.range_gain_tangential) < 0:
            raise ParameterError("range gains must be nonnegative")
        if self.dim not in (2, 3):
            raise ParameterError("dimension must be 2 or 3")

    def observation_cov(self, target_mean, pose: Pose) -> np.ndarray:
        rel = np.asarray(target_mean, dtype=float) - np.asarray(pose.position[: self.dim])
        rng_dist = float(np.linalg.norm(rel))
        if rng_dist < 1e-12:
            raise NotVisibleError("target coincides with the sensor")
        if rng_dist > self.max_range:
            raise NotVisibleError(f"target at range {rng_dist:.3g} beyond {self.max_range:g}")
        radial_var = self.sigma_radial ** 2 + (self.range_gain_radial * rng_dist) ** 2
        tang_var = self.sigma_tangential ** 2 + (self.range_gain_tangential * rng_dist) ** 2
        radial = rel / rng_dist
        cov = tang_var * np.eye(self.dim) + (radial_var - tang_var) * np.outer(radial, radial)
        return 0.5 * (cov + cov.T)

    def simulate(self, target_truth, pose: Pose, rng, mean=None):
        mean_vec = np.asarray(target_truth if mean is None else mean, dtype=float)
        truth = np.asarray(target_truth, dtype=float)
        q_truth = self.observation_cov(truth, pose)
        noise = np.linalg.cholesky(q_truth) @ rng.standard_normal(self.dim)
        return truth + noise, self.observation_cov(mean_vec, pose)


def observation_cov(model, target_mean, pose: Pose) -> np.ndarray:
    """Observation covariance Q(target_mean, pose); raises NotVisibleError
    when the pose yields no observation."""
    return model.observation_cov(target_mean, pose)


def simulate_observation(model, target_truth, pose: Pose, rng, mean=None):
    """Draw one observation (value, Q). Q is evaluated at the planner's mean
    (Assumption: the prior mean is used for observation uncertainty)."""
    return model.simulate(target_truth, pose, rng, mean=mean)


def visible(model, point, pose: Pose) -> bool:
    try:
        model.observation_cov(point, pose)
        return True
    except NotVisibleError:
        return False


def lambda_max_bound(model, target_mean, poses) -> float:
    """Largest instantaneous observation covariance trace over a workspace;
    bounds the principal eigenvalue of every reachable filtered covariance."""
    best = 0.0
    for pose in poses:
        try:
            best = max(best, float(np.trace(model.observation_cov(target_mean, pose))))
        except NotVisibleError:
            continue
    if best == 0.0:
        raise NotVisibleError("target is not visible from any workspace pose")
    return best


# ---------------------------------------------------------------------------
# Kalman fusion


def fuse(prior: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Information-form covariance update (prior^-1 + q^-1)^-1.

    Strictly decreases the trace for SPD inputs.
    """
    prior = check_sym_pd(prior, "prior")
    q = check_sym_pd(q, "q")
    fused = np.linalg.inv(np.linalg.inv(prior) + np.linalg.inv(q))
    return 0.5 * (fused + fused.T)


def kf_update(belief: TargetBelief, value, q) -> TargetBelief:
    """Stationary-state Kalman update of mean and covariance with a direct
    observation of the state."""
    prior_info = np.linalg.inv(belief.cov)
    q_info = np.linalg.inv(check_sym_pd(q, "q"))
    cov = np.linalg.inv(prior_info + q_info)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (prior_info @ belief.mean + q_info @ np.asarray(value, dtype=float))
    return TargetBelief(mean=mean, cov=cov)


# ---------------------------------------------------------------------------
# Appendix pipeline: pixel bias correction by ordinary least squares


@dataclass(frozen=True)
class PixelCorrector:
    """Linear pixel corrector: corrected = features(raw) @ coeffs."""

    coeffs: np.ndarray        # (6, 3)
    residual_cov: np.ndarray  # (3, 3)

    def __post_init__(self):
        object.__setattr__(self, "coeffs", np.asarray(self.coeffs, dtype=float))
        object.__setattr__(self, "residual_cov",
                           check_sym_psd(np.asarray(self.residual_cov, dtype=float),
                                         "residual_cov"))
        if self.coeffs.shape != (6, 3):
            raise ParameterError(f"coefficient matrix must be 6x3, got {self.coeffs.shape}")


def pixel_features(pixels) -> np.ndarray:
    """Feature row [1, y, d, x_L + x_R, y*d, (x_L + x_R)/d] for one pixel tuple."""
    x_l, x_r, y = (float(v) for v in pixels)
    d = x_l - x_r
    if d <= 0:
        raise GeometryError(f"non-positive disparity {d:g}")
    s = x_l + x_r
    return np.array([1.0, y, d, s, y * d, s / d])


def fit_corrector(raw_pixels, true_pixels) -> PixelCorrector:
    """Ordinary least squares fit of the pixel bias model.

    ``raw_pixels`` and ``true_pixels`` are (n, 3) arrays of observed and
    ground-truth-projected (x_L, x_R, y) tuples; n >= 7 rows are required.
    """
    raw = np.asarray(raw_pixels, dtype=float)
    true = np.asarray(true_pixels, dtype=float)
    if raw.ndim != 2 or raw.shape[1] != 3 or raw.shape != true.shape:
        raise TrainingError("training data must be matching (n, 3) arrays")
    if raw.shape[0] < 7:
        raise TrainingError(f"need at least 7 training rows, got {raw.shape[0]}")
    features = np.empty((raw.shape[0], 6))
    for i, row in enumerate(raw):
        features[i] = pixel_features(row)
    gram = features.T @ features
    if np.linalg.cond(gram) > 1e12:
        raise TrainingError("feature matrix is rank deficient or ill conditioned")
    coeffs = np.linalg.solve(gram, features.T @ true)
    residuals = true - features @ coeffs
    residual_cov = np.cov(residuals, rowvar=False, ddof=1)
    return PixelCorrector(coeffs=coeffs, residual_cov=0.5 * (residual_cov + residual_cov.T))


def correct(corrector: PixelCorrector, pixels) -> np.ndarray:
    """Apply the fitted corrector to one raw pixel tuple."""
    return pixel_features(pixels) @ corrector.coeffs


def load_corrector_training(path):
    """Read corrector training data from CSV with columns
    x_L, x_R, y, gt_x_L, gt_x_R, gt_y."""
    raw, true = [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"x_L", "x_R", "y", "gt_x_L", "gt_x_R", "gt_y"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise TrainingError(f"training CSV must have columns {sorted(required)}")
        for row in reader:
            raw.append([float(row["x_L"]), float(row["x_R"]), float(row["y"])])
            true.append([float(row["gt_x_L"]), float(row["gt_x_R"]), float(row["gt_y"])])
    return np.asarray(raw), np.asarray(true)
