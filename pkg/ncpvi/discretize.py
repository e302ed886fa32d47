"""Uniform 1D grids, finite-difference Laplacians and lumped mass weights."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np
from scipy import linalg, sparse

MIN_NODES = 3


class Boundary(str, Enum):
    DIRICHLET = "dirichlet"
    NEUMANN = "neumann"


class GridError(ValueError):
    """Raised when a grid cannot be built from the requested layout."""


class GridMismatchError(ValueError):
    """Raised when a field or operator lives on a different grid than expected."""


@dataclass(frozen=True, eq=False)
class Grid1D:
    """Uniform node layout on (0, 1).

    Dirichlet grids store interior nodes only (h = 1/(n+1)); Neumann grids
    include both endpoints (h = 1/(n-1)).
    """

    n: int
    h: float
    nodes: np.ndarray
    boundary: Boundary

    def matches(self, other: Grid1D) -> bool:
        return self is other or (
            self.boundary == other.boundary and self.n == other.n and self.h == other.h
        )

    def require(self, other: Grid1D, what: str = "field") -> None:
        if not self.matches(other):
            raise GridMismatchError(
                f"{what} lives on a {other.boundary.value} grid with n={other.n}, "
                f"expected {self.boundary.value} grid with n={self.n}"
            )


@dataclass(frozen=True, eq=False)
class FieldVector:
    """Nodal values of a function on a Grid1D. Values are read-only."""

    values: np.ndarray
    grid: Grid1D

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float)
        if values.shape != (self.grid.n,):
            raise GridMismatchError(
                f"Field has shape {values.shape}, grid expects ({self.grid.n},)"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("Field values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid1D) -> FieldVector:
        return cls(np.zeros(grid.n), grid)

    @classmethod
    def from_function(cls, grid: Grid1D, fn) -> FieldVector:
        return cls(np.asarray(fn(grid.nodes), dtype=float), grid)


@dataclass(frozen=True, eq=False)
class BandedSpdMatrix:
    """Symmetric banded matrix in scipy upper storage: bands[u + i - j, j] = a[i, j]."""

    bands: np.ndarray

    def __post_init__(self) -> None:
        bands = np.array(self.bands, dtype=float)
        if bands.ndim != 2:
            raise ValueError("Banded storage must be two-dimensional")
        bands.flags.writeable = False
        object.__setattr__(self, "bands", bands)

    @property
    def size(self) -> int:
        return int(self.bands.shape[1])

    @property
    def bandwidth(self) -> int:
        return int(self.bands.shape[0]) - 1

    def diagonal(self) -> np.ndarray:
        return self.bands[-1].copy()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Multiply a vector, or each column of a matrix."""
        x = np.asarray(x, dtype=float)
        col = (slice(None),) + (None,) * (x.ndim - 1)
        u = self.bandwidth
        out = self.bands[u][col] * x
        for k in range(1, u + 1):
            off = self.bands[u - k, k:][col]
            out[:-k] += off * x[k:]
            out[k:] += off * x[:-k]
        return out

    def to_dense(self) -> np.ndarray:
        u = self.bandwidth
        dense = np.diag(self.bands[u])
        for k in range(1, u + 1):
            off = self.bands[u - k, k:]
            dense += np.diag(off, k) + np.diag(off, -k)
        return dense

    @cached_property
    def _factor(self) -> np.ndarray:
        # Raises LinAlgError when a pivot is not positive.
        return linalg.cholesky_banded(self.bands, lower=False)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return linalg.cho_solve_banded((self._factor, False), rhs)

    def shifted_identity(self, alpha: float) -> BandedSpdMatrix:
        """Return I + alpha * self."""
        bands = alpha * self.bands
        bands[-1] += 1.0
        return BandedSpdMatrix(bands)


def build_grid(n: int, boundary: Boundary | str) -> Grid1D:
    boundary = Boundary(boundary)
    if int(n) != n or n < MIN_NODES:
        raise GridError(f"Grid needs at least {MIN_NODES} nodes, got {n}")
    n = int(n)
    if boundary == Boundary.DIRICHLET:
        h = 1.0 / (n + 1)
        nodes = np.arange(1, n + 1) * h
    else:
        h = 1.0 / (n - 1)
        nodes = np.linspace(0.0, 1.0, n)
    nodes.flags.writeable = False
    return Grid1D(n=n, h=h, nodes=nodes, boundary=boundary)


def laplacian(grid: Grid1D, boundary: Boundary | str | None = None) -> BandedSpdMatrix:
    """Three-point stencil of -Δ on the grid.

    Dirichlet rows eliminate the zero boundary values; Neumann end rows use the
    one-sided flux so the matrix stays symmetric with constants in its null space.
    """
    boundary = grid.boundary if boundary is None else Boundary(boundary)
    if boundary != grid.boundary:
        raise GridMismatchError(
            f"Requested {boundary.value} Laplacian on a {grid.boundary.value} grid"
        )
    inv_h2 = 1.0 / grid.h**2
    diag = np.full(grid.n, 2.0 * inv_h2)
    if boundary == Boundary.NEUMANN:
        diag[0] = diag[-1] = inv_h2
    upper = np.empty(grid.n)
    upper[0] = 0.0
    upper[1:] = -inv_h2
    return BandedSpdMatrix(np.vstack([upper, diag]))


def mass_weights(grid: Grid1D) -> BandedSpdMatrix:
    """Lumped mass M = h I."""
    return BandedSpdMatrix(np.full((1, grid.n), grid.h))


def m_inner(grid: Grid1D, a: np.ndarray, b: np.ndarray) -> float:
    return float(grid.h * np.dot(a, b))


def m_norm(grid: Grid1D, a: np.ndarray) -> float:
    return float(np.sqrt(grid.h * np.dot(a, a)))


def interpolation_matrix(nodes: np.ndarray, points: np.ndarray) -> sparse.csr_matrix:
    """Rows of piecewise-linear interpolation weights from `nodes` to `points`."""
    nodes = np.asarray(nodes, dtype=float)
    points = np.asarray(points, dtype=float)
    tol = 1e-12 * max(1.0, float(np.abs(nodes).max()))
    if points.size and (points.min() < nodes[0] - tol or points.max() > nodes[-1] + tol):
        raise GridError(
            f"Interpolation points must lie in [{nodes[0]}, {nodes[-1]}], "
            f"got [{points.min()}, {points.max()}]"
        )
    right = np.clip(np.searchsorted(nodes, points, side="right"), 1, nodes.size - 1)
    left = right - 1
    t = np.clip((points - nodes[left]) / (nodes[right] - nodes[left]), 0.0, 1.0)
    rows = np.repeat(np.arange(points.size), 2)
    cols = np.column_stack([left, right]).ravel()
    vals = np.column_stack([1.0 - t, t]).ravel()
    return sparse.csr_matrix((vals, (rows, cols)), shape=(points.size, nodes.size))
