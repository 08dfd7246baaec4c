import json
import math

import numpy as np
import pytest

from covplan.covgrid import (
    CovGrid,
    GridParams,
    assemble,
    build_alpha_set,
    build_lambda_set,
    cov_from_triple,
    direction_counts,
    expected_member_count,
    grid_from_dict,
    grid_to_dict,
    orthonormal_completion,
    principal_eigpair,
    project,
    sample_directions,
)
from covplan.errors import DomainError, ParameterError


def random_spd(rng, n, scale=1.0):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T + n * np.eye(n) * 0.1)


def staged_projection_oracle(grid, sigma):
    """Brute-force search over all stored triples with the staged metric.

    Lexicographic minimum over (|lam - lam_max|, lam_idx, -|<u, u_max>|,
    dir_idx, |alpha - ratio|, alpha_idx), matching the staged rounding and its
    lowest-index tie rule without going through the library's staged code.
    """
    eigvals = np.linalg.eigvalsh(sigma)
    lam_max = eigvals[-1]
    if lam_max < grid.tolerance:
        return grid.zero_index
    _, u_max = principal_eigpair(sigma)
    ratio = max(eigvals[0], 0.0) / lam_max
    best_key, best_idx = None, None
    for idx, triple in enumerate(grid.triples):
        if triple is None:
            continue
        li, ai, ti = triple
        lam = grid.eigen.lambdas[li]
        alpha = grid.eigen.alphas[ai]
        u = grid.eigen.dirs[li][ti]
        key = (abs(lam - lam_max), li, -abs(u @ u_max), ti, abs(alpha - ratio), ai)
        if best_key is None or key < best_key:
            best_key, best_idx = key, idx
    return best_idx


@pytest.fixture(scope="module")
def small_grid():
    params = GridParams(dim=3, lambda_max=2.0, n_lambda=4, n_alpha=3,
                        n_dirs_max=10, kappa_lambda=6.0, kappa_alpha=3.0)
    return assemble(params, seed=11)


class TestLambdaSet:
    def test_six_rung_ladder(self):
        got = build_lambda_set(1.0, 6, 9.0)
        want = np.array([math.exp(v) for v in (0.0, -1.5, -3.0, -4.5, -6.0, -7.5)])
        np.testing.assert_allclose(got, want, rtol=0, atol=0)
        assert got[0] == 1.0

    def test_single_element(self):
        np.testing.assert_array_equal(build_lambda_set(5.0, 1, 3.0), [5.0])

    def test_ten_rungs(self):
        got = build_lambda_set(1.0, 10, 10.0)
        assert len(got) == 10
        assert got.min() == pytest.approx(math.exp(-9.0), rel=0, abs=0)
        assert got.max() == 1.0

    def test_rejects_nonpositive(self):
        with pytest.raises(ParameterError):
            build_lambda_set(-1.0, 3, 2.0)
        with pytest.raises(ParameterError):
            build_lambda_set(1.0, 0, 2.0)


class TestAlphaSet:
    def test_three_by_three(self):
        got = build_alpha_set(3, 3.0)
        np.testing.assert_allclose(got, [1.0, math.exp(-1.0), math.exp(-2.0)])

    def test_single(self):
        np.testing.assert_array_equal(build_alpha_set(1, 7.0), [1.0])

    def test_kappa_seven(self):
        got = build_alpha_set(3, 7.0)
        np.testing.assert_allclose(got, [1.0, math.exp(-7.0 / 3.0), math.exp(-14.0 / 3.0)])

    def test_contains_one_and_in_unit_interval(self):
        for n, kappa in [(2, 1.0), (5, 4.0), (9, 12.0)]:
            got = build_alpha_set(n, kappa)
            assert got[0] == 1.0
            assert np.all(got > 0) and np.all(got <= 1)


class TestSampleDirections:
    def test_two_lines_in_plane_are_orthogonal(self):
        # 4 ring charges at equilibrium form a square; one per antipodal pair
        dirs = sample_directions(2, 2, seed=5)
        angle = abs(dirs[0] @ dirs[1])
        assert angle < 1e-4

    def test_fifty_lines_on_sphere(self):
        dirs = sample_directions(3, 50, seed=1)
        assert dirs.shape == (50, 3)
        np.testing.assert_allclose(np.linalg.norm(dirs, axis=1), 1.0, atol=1e-12)
        gram = np.abs(dirs @ dirs.T)
        np.fill_diagonal(gram, 0.0)
        assert gram.max() < 1.0 - 1e-6  # no equal or antipodal pair

    def test_single_direction(self):
        dirs = sample_directions(4, 1, seed=9)
        assert dirs.shape == (1, 4)
        assert np.linalg.norm(dirs[0]) == pytest.approx(1.0, abs=1e-12)

    def test_deterministic_for_seed(self):
        a = sample_directions(3, 7, charge_iters=100, seed=42)
        b = sample_directions(3, 7, charge_iters=100, seed=42)
        np.testing.assert_array_equal(a, b)

    def test_hemisphere_convention(self):
        dirs = sample_directions(3, 20, charge_iters=200, seed=3)
        assert np.all(dirs[:, -1] >= 0)

    def test_relaxation_beats_random_sampling(self):
        # min pairwise line angle after relaxation exceeds random placement
        def min_line_angle(dirs):
            gram = np.abs(dirs @ dirs.T)
            np.fill_diagonal(gram, 0.0)
            return np.arccos(np.clip(gram.max(), -1, 1))

        relaxed = [min_line_angle(sample_directions(3, 12, charge_iters=500, seed=s))
                   for s in range(5)]
        rng = np.random.default_rng(0)
        random_angles = []
        for _ in range(5):
            pts = rng.standard_normal((12, 3))
            pts /= np.linalg.norm(pts, axis=1, keepdims=True)
            random_angles.append(min_line_angle(pts))
        assert min(relaxed) > max(random_angles)


class TestAssemble:
    def test_direction_count_formula(self):
        params = GridParams(dim=3, lambda_max=1.0, n_lambda=6, n_alpha=3,
                            n_dirs_max=98, kappa_lambda=9.0, kappa_alpha=3.0)
        counts = direction_counts(params)
        assert counts[0] == 98
        assert counts[1] == math.ceil(math.exp(-1.5) * 98)  # == 22
        assert counts[1] == 22

    def test_identity_member(self):
        e1 = np.array([1.0, 0.0])
        np.testing.assert_allclose(cov_from_triple(1.0, 1.0, e1), np.eye(2), atol=1e-12)

    def test_minimal_grid_has_two_members(self):
        params = GridParams(dim=2, lambda_max=1.0, n_lambda=1, n_alpha=1,
                            n_dirs_max=1, kappa_lambda=1.0, kappa_alpha=1.0)
        grid = assemble(params, seed=0)
        assert len(grid) == 2
        np.testing.assert_array_equal(grid.member(0), np.zeros((2, 2)))

    def test_member_count_matches_closed_form(self, small_grid):
        assert len(small_grid) == expected_member_count(small_grid.params)

    def test_members_have_grid_eigenstructure(self, small_grid):
        # one eigenvalue lam, n-1 eigenvalues alpha*lam, within 1e-9 * lambda_max
        tol = 1e-9 * small_grid.params.lambda_max
        for idx, triple in enumerate(small_grid.triples):
            if triple is None:
                continue
            li, ai, _ = triple
            lam = small_grid.eigen.lambdas[li]
            alpha = small_grid.eigen.alphas[ai]
            eigvals = np.sort(np.linalg.eigvalsh(small_grid.member(idx)))
            assert abs(eigvals[-1] - lam) < tol
            np.testing.assert_allclose(eigvals[:-1], alpha * lam, atol=tol)

    def test_completion_is_orthonormal(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            u = rng.standard_normal(4)
            u /= np.linalg.norm(u)
            basis = np.column_stack([u, orthonormal_completion(u)])
            np.testing.assert_allclose(basis.T @ basis, np.eye(4), atol=1e-10)

    def test_closed_form_equivalence(self):
        # lam * (alpha*I + (1-alpha)*u u^T) is the basis-free form of the member map
        rng = np.random.default_rng(3)
        for _ in range(20):
            u = rng.standard_normal(3)
            u /= np.linalg.norm(u)
            lam, alpha = 0.7, 0.3
            direct = lam * (alpha * np.eye(3) + (1 - alpha) * np.outer(u, u))
            np.testing.assert_allclose(cov_from_triple(lam, alpha, u), direct, atol=1e-12)


class TestProject:
    def test_idempotent_on_members(self, small_grid):
        # alpha == 1 members are spherical: every direction generates the same
        # matrix, so the index is not recoverable from the matrix; those project
        # to an identical matrix, all others to their own exact index.
        for idx in range(1, len(small_grid)):
            got = project(small_grid, small_grid.member(idx))
            _, ai, _ = small_grid.triples[idx]
            if small_grid.eigen.alphas[ai] == 1.0:
                np.testing.assert_allclose(small_grid.member(got), small_grid.member(idx),
                                           atol=1e-12)
            else:
                assert got == idx

    def test_below_tolerance_goes_to_zero(self, small_grid):
        lam = 0.25 * float(small_grid.eigen.lambdas.min())
        sigma = lam * np.eye(small_grid.params.dim)
        assert project(small_grid, sigma) == small_grid.zero_index

    def test_boundary_rounds_to_smallest_rung_not_zero(self, small_grid):
        sigma = small_grid.tolerance * np.eye(small_grid.params.dim)
        idx = project(small_grid, sigma)
        assert idx != small_grid.zero_index
        li, _, _ = small_grid.triples[idx]
        assert li == len(small_grid.eigen.lambdas) - 1

    def test_matches_staged_bruteforce_oracle(self, small_grid):
        rng = np.random.default_rng(7)
        for _ in range(300):
            sigma = random_spd(rng, 3, scale=10 ** rng.uniform(-4, 0.3))
            assert project(small_grid, sigma) == staged_projection_oracle(small_grid, sigma)

    def test_rejects_bad_input(self, small_grid):
        with pytest.raises(DomainError):
            project(small_grid, np.array([[1.0, 2.0], [0.0, 1.0]]))
        with pytest.raises(DomainError):
            project(small_grid, np.diag([1.0, -0.5, 0.2]))
        with pytest.raises(DomainError):
            project(small_grid, np.eye(2))


class TestSpdIdentities:
    def test_fusion_decreases_trace_on_grid_members(self, small_grid):
        rng = np.random.default_rng(11)
        members = small_grid.members[1:]
        for i in range(1000):
            sigma = members[i % len(members)]
            q = random_spd(rng, 3, scale=10 ** rng.uniform(-2, 1))
            fused = np.linalg.inv(np.linalg.inv(sigma) + np.linalg.inv(q))
            assert np.trace(fused) < np.trace(sigma)

    def test_identity_minus_inverse_is_spd(self):
        # I - (I + C)^{-1} is SPD for SPD C
        rng = np.random.default_rng(12)
        for _ in range(200):
            c = random_spd(rng, rng.integers(2, 5))
            mat = np.eye(c.shape[0]) - np.linalg.inv(np.eye(c.shape[0]) + c)
            assert np.linalg.eigvalsh(mat).min() > 0

    def test_fusion_trace_strictly_decreases(self):
        rng = np.random.default_rng(13)
        for _ in range(200):
            n = int(rng.integers(2, 4))
            a, b = random_spd(rng, n), random_spd(rng, n)
            fused = np.linalg.inv(np.linalg.inv(a) + np.linalg.inv(b))
            assert np.trace(fused) < np.trace(a)


class TestSerialization:
    def test_round_trip_bit_exact(self, small_grid):
        doc = grid_to_dict(small_grid)
        text = json.dumps(doc, sort_keys=True)
        restored = grid_from_dict(json.loads(text))
        assert json.dumps(grid_to_dict(restored), sort_keys=True) == text

    def test_round_trip_preserves_projection(self, small_grid):
        restored = grid_from_dict(grid_to_dict(small_grid))
        rng = np.random.default_rng(21)
        for _ in range(50):
            sigma = random_spd(rng, 3)
            assert project(small_grid, sigma) == project(restored, sigma)

    def test_save_load(self, small_grid, tmp_path):
        from covplan.covgrid import load_grid, save_grid

        path = tmp_path / "grid.json"
        save_grid(small_grid, path)
        loaded = load_grid(path)
        assert isinstance(loaded, CovGrid)
        assert loaded.content_hash() == small_grid.content_hash()
