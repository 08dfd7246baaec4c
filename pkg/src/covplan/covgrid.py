"""Finite discretization of the positive-definite covariance cone.

A grid is generated from three ingredients: a logspace ladder of principal
eigenvalues, a logspace ladder of inverse condition numbers in (0, 1], and,
for every eigenvalue rung, a set of principal directions obtained by relaxing
mutually repelling point charges on the unit sphere (antipodal pairs count as
one direction, i.e. the directions sample lines, not vectors).

Every grid member is the matrix

    cov_from_triple(lam, alpha, u) = lam * [u B] diag(1, alpha*I) [u B]^T

for one generating triple, where B is a deterministic orthonormal completion
of u. Index 0 is reserved for the absorbing zero matrix, which stands for
"estimation complete to tolerance" with tolerance = half the smallest
eigenvalue rung. Projection onto the grid is staged: round the principal
eigenvalue first (to zero if below tolerance), then pick the stored direction
with the largest absolute inner product, then round the eigenvalue ratio.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ParameterError
from .utils import check_sym_psd, content_hash, np_to_list

CHARGE_CONVERGENCE = 1e-6


@dataclass(frozen=True)
class GridParams:
    """Generating parameters for a covariance grid.

    ``lambda_max`` bounds the trace of any reachable covariance;
    ``n_dirs_max`` is the direction count used at the largest eigenvalue rung,
    smaller rungs get proportionally fewer directions at equal sphere density.
    """

    dim: int
    lambda_max: float
    n_lambda: int
    n_alpha: int
    n_dirs_max: int
    kappa_lambda: float
    kappa_alpha: float
    charge_iters: int = 2000
    charge_step: float = 1.0

    def __post_init__(self):
        if self.dim < 2:
            raise ParameterError(f"dim must be >= 2, got {self.dim}")
        if self.lambda_max <= 0:
            raise ParameterError(f"lambda_max must be positive, got {self.lambda_max}")
        for name in ("n_lambda", "n_alpha", "n_dirs_max"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.kappa_lambda <= 0 or self.kappa_alpha <= 0:
            raise ParameterError("kappa gains must be positive")
        if self.charge_iters < 0 or self.charge_step <= 0:
            raise ParameterError("charge simulation parameters out of range")

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "lambda_max": self.lambda_max,
            "n_lambda": self.n_lambda,
            "n_alpha": self.n_alpha,
            "n_dirs_max": self.n_dirs_max,
            "kappa_lambda": self.kappa_lambda,
            "kappa_alpha": self.kappa_alpha,
            "charge_iters": self.charge_iters,
            "charge_step": self.charge_step,
        }


def build_lambda_set(lambda_max: float, n_lambda: int, kappa_lambda: float) -> np.ndarray:
    """Logspace ladder of principal eigenvalues, largest (= lambda_max) first."""
    if lambda_max <= 0 or n_lambda < 1 or kappa_lambda <= 0:
        raise ParameterError("lambda set parameters must be positive")
    i = np.arange(n_lambda, 0, -1, dtype=float)
    return lambda_max * np.exp(kappa_lambda * (i - n_lambda) / n_lambda)


def build_alpha_set(n_alpha: int, kappa_alpha: float) -> np.ndarray:
    """Logspace ladder of eigenvalue ratios in (0, 1], starting at 1."""
    if n_alpha < 1 or kappa_alpha <= 0:
        raise ParameterError("alpha set parameters must be positive")
    i = np.arange(n_alpha, 0, -1, dtype=float)
    return np.exp(kappa_alpha * (i - n_alpha) / n_alpha)


def _canonical_hemisphere(points: np.ndarray) -> np.ndarray:
    """Keep one representative per antipodal pair.

    The kept representative has positive last coordinate; exact equatorial
    ties keep the sign that makes the first nonzero coordinate positive.
    """
    out = points.copy()
    for row in out:
        if row[-1] < 0:
            row *= -1.0
        elif row[-1] == 0:
            for c in row:
                if c != 0:
                    if c < 0:
                        row *= -1.0
                    break
    return out


def _sphere_area(dim: int) -> float:
    return 2.0 * math.pi ** (dim / 2.0) / math.gamma(dim / 2.0)


def sample_directions(dim: int, count: int, charge_iters: int = 2000,
                      charge_step: float = 1.0, seed: int = 0) -> np.ndarray:
    """Spread ``count`` lines in R^dim by relaxing 2*count charges on the sphere.

    Each charge repels every other with an inverse-square force; forces are
    projected onto the sphere's tangent plane and a fixed descent step is
    taken, renormalizing each iteration. ``charge_step`` is a dimensionless
    gain: the actual step is scaled to the typical charge spacing so descent
    stays below the oscillation limit at any density, and per-iteration
    displacement is capped at half that spacing to tame early blow-ups.
    The configuration is kept exactly antipodally symmetric, so discarding one
    hemisphere leaves ``count`` pairwise non-antipodal unit vectors.
    Deterministic for a given seed.
    """
    if dim < 2:
        raise ParameterError(f"dim must be >= 2, got {dim}")
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((count, dim))
    norms = np.linalg.norm(pts, axis=1, keepdims=True)
    while np.any(norms < 1e-12):
        bad = norms[:, 0] < 1e-12
        pts[bad] = rng.standard_normal((int(bad.sum()), dim))
        norms = np.linalg.norm(pts, axis=1, keepdims=True)
    charges = np.vstack([pts / norms, -pts / norms])

    spacing = (_sphere_area(dim) / (2.0 * count)) ** (1.0 / (dim - 1))
    step = charge_step * spacing ** 3 / 8.0
    cap = 0.5 * spacing
    for _ in range(charge_iters):
        diff = charges[:, None, :] - charges[None, :, :]
        dist2 = np.einsum("ijk,ijk->ij", diff, diff)
        np.fill_diagonal(dist2, np.inf)
        dist2 = np.maximum(dist2, 1e-12)
        force = np.einsum("ijk,ij->ik", diff, dist2 ** -1.5)
        force -= np.einsum("ik,ik->i", force, charges)[:, None] * charges
        displacement = step * force
        disp_norm = np.linalg.norm(displacement, axis=1, keepdims=True)
        displacement *= np.minimum(1.0, cap / np.maximum(disp_norm, 1e-300))
        charges = charges + displacement
        charges /= np.linalg.norm(charges, axis=1, keepdims=True)
        # mirror the second half so float drift cannot break the pairing
        charges[count:] = -charges[:count]
        if np.linalg.norm(displacement, axis=1).max() < CHARGE_CONVERGENCE:
            break

    return _canonical_hemisphere(charges[:count])


def orthonormal_completion(u: np.ndarray) -> np.ndarray:
    """Deterministic orthonormal basis of the complement of ``u`` (unit vector).

    Gram-Schmidt against the canonical basis in fixed order; the near-parallel
    canonical vector is skipped, so the result is a pure function of u.
    """
    u = np.asarray(u, dtype=float)
    n = u.shape[0]
    basis = [u]
    for k in range(n):
        if len(basis) == n:
            break
        e = np.zeros(n)
        e[k] = 1.0
        v = e - sum((e @ b) * b for b in basis)
        norm = np.linalg.norm(v)
        if norm > 1e-8:
            basis.append(v / norm)
    return np.column_stack(basis[1:])


def cov_from_triple(lam: float, alpha: float, u: np.ndarray) -> np.ndarray:
    """Covariance with principal eigenpair (lam, u) and remaining eigenvalues alpha*lam."""
    u = np.asarray(u, dtype=float)
    full_basis = np.column_stack([u, orthonormal_completion(u)])
    core = np.diag(np.concatenate(([1.0], np.full(u.shape[0] - 1, alpha))))
    mat = lam * full_basis @ core @ full_basis.T
    return 0.5 * (mat + mat.T)


@dataclass(frozen=True)
class EigenGrid:
    """Eigenvalue rungs, ratio rungs, and per-rung direction sets."""

    lambdas: np.ndarray
    alphas: np.ndarray
    dirs: tuple  # one (count_i, dim) array per lambda rung

    def __post_init__(self):
        if len(self.dirs) != len(self.lambdas):
            raise ParameterError("one direction set per eigenvalue rung required")


@dataclass
class CovGrid:
    """The assembled finite covariance set with projection support."""

    params: GridParams
    eigen: EigenGrid
    members: list  # n x n arrays; members[0] is the zero matrix
    triples: list  # (lambda_idx, alpha_idx, dir_idx) per member; None at index 0
    seed: int
    zero_index: int = 0
    tolerance: float = 0.0
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._index:
            self._index = {t: i for i, t in enumerate(self.triples) if t is not None}
        if self.tolerance == 0.0:
            self.tolerance = 0.5 * float(np.min(self.eigen.lambdas))

    def __len__(self):
        return len(self.members)

    def member(self, idx: int) -> np.ndarray:
        return self.members[idx]

    def index_of(self, lambda_idx: int, alpha_idx: int, dir_idx: int) -> int:
        return self._index[(lambda_idx, alpha_idx, dir_idx)]

    @property
    def traces(self) -> np.ndarray:
        return np.array([float(np.trace(m)) for m in self.members])

    def content_hash(self) -> str:
        return content_hash(grid_to_dict(self))


def direction_counts(params: GridParams) -> list:
    """Directions per eigenvalue rung: ceil((lam / lambda_max) * n_dirs_max)."""
    lambdas = build_lambda_set(params.lambda_max, params.n_lambda, params.kappa_lambda)
    return [int(math.ceil((lam / params.lambda_max) * params.n_dirs_max)) for lam in lambdas]


def assemble(params: GridParams, seed: int = 0) -> CovGrid:
    """Build the full grid: ladders, per-rung direction sets, member matrices."""
    lambdas = build_lambda_set(params.lambda_max, params.n_lambda, params.kappa_lambda)
    alphas = build_alpha_set(params.n_alpha, params.kappa_alpha)
    counts = direction_counts(params)
    dirs = tuple(
        sample_directions(params.dim, counts[i], params.charge_iters,
                          params.charge_step, seed=np.random.SeedSequence([int(seed), i]))
        for i in range(params.n_lambda)
    )
    eigen = EigenGrid(lambdas=lambdas, alphas=alphas, dirs=dirs)

    members = [np.zeros((params.dim, params.dim))]
    triples = [None]
    for li, lam in enumerate(lambdas):
        for ai, alpha in enumerate(alphas):
            for ti in range(dirs[li].shape[0]):
                members.append(cov_from_triple(float(lam), float(alpha), dirs[li][ti]))
                triples.append((li, ai, ti))
    return CovGrid(params=params, eigen=eigen, members=members, triples=triples, seed=int(seed))


def expected_member_count(params: GridParams) -> int:
    """Closed-form |grid| = 1 + n_alpha * sum of per-rung direction counts."""
    return 1 + params.n_alpha * sum(direction_counts(params))


def sign_normalize(vec: np.ndarray) -> np.ndarray:
    """Flip sign so the first nonzero component is positive (line representative)."""
    for c in vec:
        if c != 0:
            return vec if c > 0 else -vec
    return vec


def principal_eigpair(sigma: np.ndarray):
    """Eigenvalues (ascending) and the sign-normalized principal eigenvector."""
    eigvals, eigvecs = np.linalg.eigh(sigma)
    return eigvals, sign_normalize(eigvecs[:, -1].copy())


def project(grid: CovGrid, sigma: np.ndarray) -> int:
    """Staged projection of a symmetric PSD matrix onto the grid.

    Stage 1 rounds the principal eigenvalue to the nearest rung (to the zero
    member iff it is strictly below tolerance); stage 2 picks the stored
    direction with the largest |inner product| with the principal eigenvector;
    stage 3 rounds the min/max eigenvalue ratio. All nearest-element ties are
    broken by the lowest stored index.
    """
    sym = check_sym_psd(sigma, "sigma")
    if sym.shape[0] != grid.params.dim:
        raise DomainError(
            f"sigma has dimension {sym.shape[0]}, grid expects {grid.params.dim}")
    eigvals, u_max = principal_eigpair(sym)
    lam_max = float(eigvals[-1])
    if lam_max < grid.tolerance:
        return grid.zero_index
    li = int(np.argmin(np.abs(grid.eigen.lambdas - lam_max)))
    ti = int(np.argmax(np.abs(grid.eigen.dirs[li] @ u_max)))
    ratio = max(float(eigvals[0]), 0.0) / lam_max
    ai = int(np.argmin(np.abs(grid.eigen.alphas - ratio)))
    return grid.index_of(li, ai, ti)


def grid_to_dict(grid: CovGrid) -> dict:
    """Self-describing JSON form; round-trips bit-exactly via grid_from_dict."""
    return {
        "kind": "covariance_grid",
        "version": 1,
        "params": grid.params.to_dict(),
        "seed": grid.seed,
        "lambdas": np_to_list(grid.eigen.lambdas),
        "alphas": np_to_list(grid.eigen.alphas),
        "directions": [np_to_list(d) for d in grid.eigen.dirs],
        "members": [np_to_list(m) for m in grid.members],
        "triples": [list(t) if t is not None else None for t in grid.triples],
        "zero_index": grid.zero_index,
        "tolerance": grid.tolerance,
    }


def grid_from_dict(doc: dict) -> CovGrid:
    if doc.get("kind") != "covariance_grid":
        raise ParameterError("not a covariance grid document")
    params = GridParams(**doc["params"])
    eigen = EigenGrid(
        lambdas=np.asarray(doc["lambdas"], dtype=float),
        alphas=np.asarray(doc["alphas"], dtype=float),
        dirs=tuple(np.asarray(d, dtype=float) for d in doc["directions"]),
    )
    members = [np.asarray(m, dtype=float) for m in doc["members"]]
    triples = [tuple(t) if t is not None else None for t in doc["triples"]]
    return CovGrid(params=params, eigen=eigen, members=members, triples=triples,
                   seed=int(doc["seed"]), zero_index=int(doc["zero_index"]),
                   tolerance=float(doc["tolerance"]))


def save_grid(grid: CovGrid, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(grid_to_dict(grid), fh, indent=1)


def load_grid(path) -> CovGrid:
    with open(path, "r", encoding="utf-8") as fh:
        return grid_from_dict(json.load(fh))
