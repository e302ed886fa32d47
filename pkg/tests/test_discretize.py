from __future__ import annotations

import unittest

import numpy as np

from ncpvi.discretize import (
    Boundary,
    FieldVector,
    GridError,
    GridMismatchError,
    build_grid,
    interpolation_matrix,
    laplacian,
    m_inner,
    m_norm,
    mass_weights,
)


class GridTests(unittest.TestCase):
    def test_dirichlet_layout(self) -> None:
        grid = build_grid(3, Boundary.DIRICHLET)
        self.assertEqual(grid.h, 0.25)
        np.testing.assert_allclose(grid.nodes, [0.25, 0.5, 0.75], rtol=0, atol=1e-15)

    def test_neumann_layout_includes_endpoints(self) -> None:
        grid = build_grid(100, "neumann")
        self.assertEqual(grid.n, 100)
        self.assertAlmostEqual(grid.h, 1.0 / 99, places=15)
        self.assertEqual(grid.nodes[0], 0.0)
        self.assertEqual(grid.nodes[-1], 1.0)
        spacing = np.diff(grid.nodes)
        self.assertLess(np.max(np.abs(spacing - grid.h)), 1e-14)

    def test_too_few_nodes_rejected(self) -> None:
        with self.assertRaises(GridError):
            build_grid(2, Boundary.DIRICHLET)

    def test_grids_compare_by_layout(self) -> None:
        a = build_grid(10, Boundary.NEUMANN)
        b = build_grid(10, Boundary.NEUMANN)
        c = build_grid(10, Boundary.DIRICHLET)
        self.assertTrue(a.matches(b))
        with self.assertRaises(GridMismatchError):
            a.require(c)


class FieldVectorTests(unittest.TestCase):
    def test_shape_and_finiteness_checked(self) -> None:
        grid = build_grid(5, Boundary.NEUMANN)
        with self.assertRaises(GridMismatchError):
            FieldVector(np.zeros(4), grid)
        with self.assertRaises(ValueError):
            FieldVector(np.array([0.0, 1.0, np.nan, 0.0, 0.0]), grid)

    def test_values_are_read_only_copies(self) -> None:
        grid = build_grid(5, Boundary.NEUMANN)
        raw = np.arange(5.0)
        field = FieldVector(raw, grid)
        raw[0] = 100.0
        self.assertEqual(field.values[0], 0.0)
        with self.assertRaises(ValueError):
            field.values[0] = 1.0


class LaplacianTests(unittest.TestCase):
    def test_dirichlet_stencil_row(self) -> None:
        grid = build_grid(3, Boundary.DIRICHLET)
        dense = laplacian(grid).to_dense()
        np.testing.assert_allclose(dense[1], 16.0 * np.array([-1.0, 2.0, -1.0]))
        np.testing.assert_array_equal(dense, dense.T)

    def test_neumann_constants_in_null_space(self) -> None:
        grid = build_grid(50, Boundary.NEUMANN)
        out = laplacian(grid).matvec(np.full(grid.n, 3.0))
        self.assertLess(np.max(np.abs(out)), 1e-12 * 3.0 / grid.h**2)

    def test_dirichlet_spectrum_matches_closed_form(self) -> None:
        grid = build_grid(200, Boundary.DIRICHLET)
        vals = np.linalg.eigvalsh(laplacian(grid).to_dense())
        k = np.arange(1, grid.n + 1)
        expected = (2.0 / grid.h**2) * (1.0 - np.cos(k * np.pi * grid.h))
        np.testing.assert_allclose(vals, expected, rtol=1e-10)
        self.assertLess(abs(vals[0] - np.pi**2) / np.pi**2, 0.01)

    def test_boundary_must_match_grid(self) -> None:
        grid = build_grid(10, Boundary.NEUMANN)
        with self.assertRaises(GridMismatchError):
            laplacian(grid, Boundary.DIRICHLET)


class BandedMatrixTests(unittest.TestCase):
    def test_solve_and_matvec_agree_with_dense(self) -> None:
        grid = build_grid(40, Boundary.NEUMANN)
        A = laplacian(grid).shifted_identity(0.05)
        dense = A.to_dense()
        rng = np.random.default_rng(0)
        x = rng.standard_normal(grid.n)
        X = rng.standard_normal((grid.n, 3))
        np.testing.assert_allclose(A.matvec(x), dense @ x, rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(A.matvec(X), dense @ X, rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(A.solve(x), np.linalg.solve(dense, x), rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(A.diagonal(), np.diag(dense))


class MassTests(unittest.TestCase):
    def test_quadrature_of_simple_fields(self) -> None:
        grid = build_grid(100, Boundary.NEUMANN)
        ones = np.ones(grid.n)
        self.assertLess(abs(m_inner(grid, ones, ones) - 1.0), 0.02)
        self.assertLess(abs(m_norm(grid, grid.nodes) ** 2 - 1.0 / 3.0), 0.02 / 3.0)
        self.assertEqual(m_norm(grid, np.zeros(grid.n)), 0.0)
        np.testing.assert_allclose(mass_weights(grid).matvec(ones), grid.h * ones)

    def test_inner_product_is_positive_definite(self) -> None:
        grid = build_grid(20, Boundary.DIRICHLET)
        rng = np.random.default_rng(3)
        for _ in range(10):
            a = rng.standard_normal(grid.n)
            self.assertGreater(m_inner(grid, a, a), 0.0)


class InterpolationTests(unittest.TestCase):
    def test_linear_functions_are_reproduced(self) -> None:
        nodes = np.linspace(0.0, 1.0, 11)
        points = np.array([0.0, 0.05, 0.33, 0.999, 1.0])
        P = interpolation_matrix(nodes, points)
        np.testing.assert_allclose(P @ (2.0 * nodes + 1.0), 2.0 * points + 1.0, atol=1e-14)
        dense = P.toarray()
        self.assertTrue(np.all(dense >= 0))
        np.testing.assert_allclose(dense.sum(axis=1), 1.0)

    def test_points_outside_nodes_rejected(self) -> None:
        with self.assertRaises(GridError):
            interpolation_matrix(np.linspace(0.1, 0.9, 5), np.array([0.05]))


if __name__ == "__main__":
    unittest.main()
