import numpy as np
import pytest

from qtk import (
    QtkError,
    ShapeError,
    gaussian_curvature,
    gradient_fd,
    grid_scan,
    hessian_fd,
    interaction_split,
    interaction_term,
)


class TestGridScan:
    def test_minimal_resolution_consistency(self):
        calls = []

        def evaluate(v):
            calls.append(v.copy())
            return float(np.sum(v**2))

        vi, vj, grid = grid_scan(evaluate, np.array([1.0, 2.0, 3.0]), 0, 2,
                                 (0.5, 1.5), (2.0, 4.0), 2)
        assert grid.shape == (2, 2)
        assert len(calls) == 4
        for r, di in enumerate(vi):
            for c, dj in enumerate(vj):
                assert grid[r, c] == di * di + 2.0 * 2.0 + dj * dj

    def test_baseline_cell_bit_exact(self):
        def evaluate(v):
            return float(np.sum(np.sin(v) * v))

        baseline = np.array([1.0, 0.5])
        vi, vj, grid = grid_scan(evaluate, baseline, 0, 1,
                                 (0.5, 1.5), (0.25, 0.75), 3)
        assert vi[1] == 1.0 and vj[1] == 0.5
        assert grid[1, 1] == evaluate(baseline.copy())

    def test_same_index_rejected(self):
        with pytest.raises(ShapeError):
            grid_scan(lambda v: 0.0, np.ones(3), 1, 1, (0, 1), (0, 1), 2)

    def test_out_of_range_index_rejected(self):
        with pytest.raises(ShapeError):
            grid_scan(lambda v: 0.0, np.ones(3), 0, 5, (0, 1), (0, 1), 2)


class TestGradient:
    def test_linear_function(self):
        grad = gradient_fd(lambda v: float(np.sum(v)), np.array([1.0, 2.0, 4.0]), h_rel=0.01)
        assert np.max(np.abs(grad - 1.0)) <= 1e-8

    def test_dim_one_matches_manual_stencil(self):
        f = lambda v: float(np.exp(v[0]))
        base = np.array([0.8])
        h = 0.01 * 0.8
        want = (f(np.array([0.8 + h])) - f(np.array([0.8 - h]))) / (2 * h)
        got = gradient_fd(f, base, h_rel=0.01)
        assert got[0] == want

    def test_non_finite_probe_rejected(self):
        def f(v):
            return float("inf") if v[0] > 1.0 else 0.0

        with pytest.raises(QtkError):
            gradient_fd(f, np.array([1.0]), h_rel=0.01)


class TestHessian:
    def test_diagonal_quadratic(self):
        a = np.array([0.7, 1.3, 2.9])
        hess = hessian_fd(lambda v: float(np.sum(a * v * v)), np.array([1.0, 1.0, 1.0]), 0.01)
        want = np.diag(2 * a)
        assert np.max(np.abs(hess.matrix - want) / np.maximum(np.abs(want), 1)) <= 1e-4

    def test_cross_term(self):
        hess = hessian_fd(lambda v: float(v[0] * v[1]), np.array([1.0, 1.0]), 0.01)
        assert hess.matrix[0, 1] == pytest.approx(1.0, rel=1e-4)
        assert hess.matrix[0, 0] == pytest.approx(0.0, abs=1e-6)

    def test_exactly_symmetric(self):
        rng = np.random.default_rng(70)
        m = rng.normal(size=(4, 4))
        sym = m + m.T

        def f(v):
            return float(v @ sym @ v + np.sum(np.sin(v)))

        hess = hessian_fd(f, rng.uniform(0.5, 1.5, size=4), 0.02)
        assert np.array_equal(hess.matrix, hess.matrix.T)

    def test_linear_in_evaluator(self):
        rng = np.random.default_rng(71)
        base = rng.uniform(0.5, 1.5, size=3)

        def f1(v):
            return float(np.sum(v**2))

        def f2(v):
            return float(v[0] * v[1] + v[2] ** 3)

        h1 = hessian_fd(f1, base, 0.01).matrix
        h2 = hessian_fd(f2, base, 0.01).matrix
        h12 = hessian_fd(lambda v: f1(v) + f2(v), base, 0.01).matrix
        assert np.max(np.abs(h12 - (h1 + h2))) <= 1e-6

    def test_subset_indices(self):
        hess = hessian_fd(lambda v: float(np.sum(v**2)), np.array([1.0, 2.0, 3.0]),
                          0.01, indices=[0, 2])
        assert hess.matrix.shape == (2, 2)
        assert list(hess.indices) == [0, 2]

    def test_h_rel_bounds(self):
        with pytest.raises(QtkError):
            hessian_fd(lambda v: 0.0, np.ones(2), 0.6)
        with pytest.raises(QtkError):
            hessian_fd(lambda v: 0.0, np.ones(2), 0.0)

    def test_nested_fd_oracle(self):
        # Hessian row i should match d/dx_i of the finite-difference gradient.
        rng = np.random.default_rng(72)
        m = rng.normal(size=(3, 3))
        sym = m + m.T

        def f(v):
            return float(v @ sym @ v + np.prod(v))

        base = rng.uniform(0.8, 1.2, size=3)
        hess = hessian_fd(f, base, 0.01).matrix

        def grad_at(point):
            return gradient_fd(f, point, h_rel=0.005)

        for i in range(3):
            h = 0.01 * base[i]
            plus = base.copy(); plus[i] += h
            minus = base.copy(); minus[i] -= h
            row = (grad_at(plus) - grad_at(minus)) / (2 * h)
            mask = np.abs(hess[i]) > 1e-6
            assert np.max(np.abs(row[mask] - hess[i][mask]) / np.abs(hess[i][mask])) <= 0.05


class TestCurvature:
    def test_paraboloid(self):
        report = gaussian_curvature(np.array([[2.0, 0.0], [0.0, 2.0]]), np.zeros(2))
        assert report.k == 4.0

    def test_large_gradient_flattens(self):
        h = np.array([[2.0, 0.0], [0.0, 2.0]])
        ks = [gaussian_curvature(h, np.array([g, 0.0])).k for g in (0.0, 10.0, 1000.0)]
        assert ks[0] > ks[1] > ks[2]
        assert ks[2] < 1e-9

    def test_pure_function(self):
        h = np.array([[1.5, 0.2], [0.2, 0.9]])
        g = np.array([0.3, -0.1])
        a = gaussian_curvature(h, g)
        b = gaussian_curvature(h, g)
        assert (a.k, a.log_abs_det, a.det_sign) == (b.k, b.log_abs_det, b.det_sign)

    def test_log_abs_det_reported(self):
        h = np.diag([1e-8, 1e-9])
        report = gaussian_curvature(h, np.zeros(2))
        assert report.log_abs_det == pytest.approx(np.log(1e-17), rel=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            gaussian_curvature(np.eye(2), np.zeros(3))


class TestInteraction:
    def test_diagonal_hessian_no_cross(self):
        h = np.diag([1.0, 2.0, 3.0])
        eps = np.array([0.5, 0.5, 0.5])
        diag, cross = interaction_split(h, eps)
        assert cross == 0.0
        assert diag == pytest.approx(interaction_term(h, eps), abs=1e-15)

    def test_pure_cross(self):
        h = np.array([[0.0, 1.0], [1.0, 0.0]])
        eps = np.array([1.0, 1.0])
        assert interaction_term(h, eps) == 2.0
        diag, cross = interaction_split(h, eps)
        assert diag == 0.0 and cross == 2.0

    def test_split_sums_to_total(self):
        rng = np.random.default_rng(73)
        for _ in range(25):
            n = int(rng.integers(2, 7))
            m = rng.normal(size=(n, n))
            h = m + m.T
            eps = rng.normal(size=n)
            diag, cross = interaction_split(h, eps)
            assert diag + cross == pytest.approx(interaction_term(h, eps), abs=1e-12)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            interaction_term(np.eye(3), np.ones(2))
