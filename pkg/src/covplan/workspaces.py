"""Workspace generators: parametric pose sets around a target location.

Three families are supported. A radial line of viewpoints (toy scale), a
polar grid (sector, semicircle, or full circle, the lab-style layout), and
concentric spherical shells with randomly distributed viewpoints (the
simulation-scale layout). Every generator returns a ``Workspace`` whose
actions include "stay" at index 0 unless disabled, so exact-zero reward ties
resolve to remaining stationary.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError
from .local_dp import Workspace
from .sensing import Pose
from .utils import wrap_angle


def make_line_workspace(center, direction=(1.0, 0.0), count=5, spacing=2.0,
                        offset=10.0, include_stay=True) -> Workspace:
    """Viewpoints on a ray from ``center``: pose i sits at offset + i*spacing.

    Actions: stay, step toward the target, step away (clamped at the ends).
    """
    if count < 1 or spacing <= 0 or offset <= 0:
        raise ParameterError("line workspace needs count >= 1 and positive geometry")
    center = np.asarray(center, dtype=float)
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    heading = wrap_angle(np.arctan2(-direction[1], -direction[0]))
    poses = [Pose(position=tuple(center + (offset + i * spacing) * direction),
                  heading=heading)
             for i in range(count)]

    idx = np.arange(count)
    columns = [idx] if include_stay else []
    names = ["stay"] if include_stay else []
    costs = [0.0] if include_stay else []
    columns += [np.maximum(idx - 1, 0), np.minimum(idx + 1, count - 1)]
    names += ["in", "out"]
    costs += [spacing, spacing]
    transition = np.column_stack(columns)
    return Workspace(poses=poses, actions=tuple(names), transition=transition,
                     travel_cost=np.array(costs))


def make_polar_workspace(center, radii, angular_step_deg=15.0, span_deg=360.0,
                         start_deg=0.0, include_stay=True) -> Workspace:
    """Polar grid of viewpoints around ``center``; 2-D only.

    ``span_deg`` of 360 wraps the angular moves; smaller sectors clamp at
    both angular extremes. Radial moves clamp at the innermost and outermost
    rings. Pose order is radius-major, innermost ring first.
    """
    radii = sorted(float(r) for r in radii)
    if not radii or radii[0] <= 0:
        raise ParameterError("polar workspace needs positive radii")
    if not 0 < angular_step_deg <= span_deg or span_deg > 360:
        raise ParameterError("invalid angular step or span")
    center = np.asarray(center, dtype=float)
    full_circle = span_deg == 360.0
    n_angles = int(round(span_deg / angular_step_deg))
    if not full_circle:
        n_angles += 1  # include both sector edges
    angles = np.radians(start_deg) + np.radians(angular_step_deg) * np.arange(n_angles)

    poses = []
    for r in radii:
        for theta in angles:
            position = center + r * np.array([np.cos(theta), np.sin(theta)])
            poses.append(Pose(position=tuple(position), heading=wrap_angle(theta + np.pi)))

    n_r, n_a = len(radii), n_angles
    index = np.arange(n_r * n_a).reshape(n_r, n_a)
    inward = index[np.maximum(np.arange(n_r) - 1, 0), :]
    outward = index[np.minimum(np.arange(n_r) + 1, n_r - 1), :]
    if full_circle:
        ccw = index[:, (np.arange(n_a) + 1) % n_a]
        cw = index[:, (np.arange(n_a) - 1) % n_a]
    else:
        ccw = index[:, np.minimum(np.arange(n_a) + 1, n_a - 1)]
        cw = index[:, np.maximum(np.arange(n_a) - 1, 0)]

    radial_cost = radii[1] - radii[0] if n_r > 1 else float(np.mean(radii))
    angular_cost = float(np.mean(radii)) * np.radians(angular_step_deg)
    columns = [index] if include_stay else []
    names = ["stay"] if include_stay else []
    costs = [0.0] if include_stay else []
    columns += [inward, outward, ccw, cw]
    names += ["in", "out", "ccw", "cw"]
    costs += [radial_cost, radial_cost, angular_cost, angular_cost]
    transition = np.column_stack([c.reshape(-1) for c in columns])
    return Workspace(poses=poses, actions=tuple(names), transition=transition,
                     travel_cost=np.array(costs))


def make_shell_workspace(center, radii, total_views, rng,
                         include_stay=True) -> Workspace:
    """Concentric spherical shells with random viewpoints; 3-D only.

    Views are spread evenly across shells (largest remainder to the inner
    shells) and ordered on each shell by azimuth for a deterministic ring.
    Actions: stay, hop to the nearest-direction view on the adjacent inner or
    outer shell, and cycle the ring on the current shell.
    """
    radii = sorted(float(r) for r in radii)
    if not radii or radii[0] <= 0:
        raise ParameterError("shell workspace needs positive radii")
    if total_views < len(radii):
        raise ParameterError("need at least one view per shell")
    center = np.asarray(center, dtype=float)
    n_shells = len(radii)
    base = total_views // n_shells
    counts = [base + (1 if i < total_views % n_shells else 0) for i in range(n_shells)]

    shell_dirs = []
    for count in counts:
        dirs = rng.standard_normal((count, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        order = np.lexsort((np.arccos(np.clip(dirs[:, 2], -1, 1)),
                            np.arctan2(dirs[:, 1], dirs[:, 0])))
        shell_dirs.append(dirs[order])

    poses, shell_of, ring_pos = [], [], []
    offsets = np.cumsum([0] + counts)
    for s, r in enumerate(radii):
        for k, d in enumerate(shell_dirs[s]):
            position = center + r * d
            heading = wrap_angle(np.arctan2(-d[1], -d[0]))
            poses.append(Pose(position=tuple(position), heading=heading))
            shell_of.append(s)
            ring_pos.append(k)

    n = len(poses)
    stay = np.arange(n)
    inward = np.empty(n, dtype=np.int64)
    outward = np.empty(n, dtype=np.int64)
    nxt = np.empty(n, dtype=np.int64)
    prv = np.empty(n, dtype=np.int64)
    for i in range(n):
        s, k = shell_of[i], ring_pos[i]
        nxt[i] = offsets[s] + (k + 1) % counts[s]
        prv[i] = offsets[s] + (k - 1) % counts[s]
        for target_shell, out in ((s - 1, inward), (s + 1, outward)):
            if 0 <= target_shell < n_shells:
                dots = shell_dirs[target_shell] @ shell_dirs[s][k]
                out[i] = offsets[target_shell] + int(np.argmax(dots))
            else:
                out[i] = i

    radial_cost = radii[1] - radii[0] if n_shells > 1 else float(np.mean(radii))
    ring_steps = []
    for s, r in enumerate(radii):
        ring = shell_dirs[s] * r
        ring_steps.extend(np.linalg.norm(ring - np.roll(ring, -1, axis=0), axis=1))
    ring_cost = float(np.mean(ring_steps))

    columns = [stay] if include_stay else []
    names = ["stay"] if include_stay else []
    costs = [0.0] if include_stay else []
    columns += [inward, outward, nxt, prv]
    names += ["in", "out", "next", "prev"]
    costs += [radial_cost, radial_cost, ring_cost, ring_cost]
    transition = np.column_stack(columns)
    return Workspace(poses=poses, actions=tuple(names), transition=transition,
                     travel_cost=np.array(costs))
