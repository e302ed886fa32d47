"""Elliptic forward map -αw'' + w = u, w = 0 on the boundary, observed pointwise."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import sparse

from ncpvi.discretize import (
    Boundary,
    FieldVector,
    Grid1D,
    GridMismatchError,
    BandedSpdMatrix,
    build_grid,
    interpolation_matrix,
    laplacian,
)

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_PDE = 0.05
DEFAULT_NOISE_PCT = 0.05
DEFAULT_FINE_N = 10_000
DEFAULT_OBS_POINTS = tuple(i / 20 for i in range(1, 21))


class ShapeMismatchError(ValueError):
    """Raised when a data-space vector has the wrong length."""


class InverseCrimeError(ValueError):
    """Raised when synthetic data would be generated on the inversion mesh."""


@dataclass(frozen=True, eq=False)
class DataVector:
    """Observations d with the noise precision τ they were generated with."""

    d: np.ndarray
    tau: float
    noise_pct: float
    x_obs: np.ndarray
    fine_n: int

    def __post_init__(self) -> None:
        d = np.array(self.d, dtype=float)
        x_obs = np.array(self.x_obs, dtype=float)
        if d.shape != x_obs.shape:
            raise ShapeMismatchError(f"{d.size} observations for {x_obs.size} points")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ValueError(f"Noise precision must be positive and finite, got {self.tau}")
        if not np.all(np.isfinite(d)):
            raise ValueError("Observations must be finite")
        d.flags.writeable = False
        x_obs.flags.writeable = False
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "x_obs", x_obs)


@dataclass(frozen=True, eq=False)
class ForwardOperator:
    """H = B A_D^-1 P mapping parameter-grid fields to N_d observations.

    P transfers the parameter field to the Dirichlet interior nodes, A_D is
    I - α_pde Δ_D, and B interpolates the solution (padded with its zero
    boundary values) at the observation points.
    """

    grid: Grid1D
    param_grid: Grid1D
    alpha_pde: float
    obs_points: np.ndarray
    solver: BandedSpdMatrix
    obs_matrix: sparse.csr_matrix
    transfer: sparse.csr_matrix

    @property
    def n_obs(self) -> int:
        return int(self.obs_points.size)

    def solve_pde(self, u: FieldVector) -> FieldVector:
        self.grid.require(u.grid, "PDE source")
        return FieldVector(self.solver.solve(u.values), self.grid)

    def _observe_solution(self, w: np.ndarray) -> np.ndarray:
        return self.obs_matrix @ np.concatenate(([0.0], w, [0.0]))

    def observe_array(self, x: np.ndarray) -> np.ndarray:
        return self._observe_solution(self.solver.solve(self.transfer @ x))

    def adjoint_array(self, y: np.ndarray) -> np.ndarray:
        # A_D is symmetric, so the adjoint PDE solve reuses the same factor.
        z = self.solver.solve((self.obs_matrix.T @ y)[1:-1])
        return (self.transfer.T @ z) / self.param_grid.h

    def apply_H(self, u: FieldVector) -> np.ndarray:
        self.param_grid.require(u.grid, "parameter")
        return self.observe_array(u.values)

    def apply_H_adjoint(self, y: np.ndarray) -> FieldVector:
        y = np.asarray(y, dtype=float)
        if y.shape != (self.n_obs,):
            raise ShapeMismatchError(f"Expected {self.n_obs} observations, got shape {y.shape}")
        return FieldVector(self.adjoint_array(y), self.param_grid)

    def dense_matrix(self) -> np.ndarray:
        """Column-by-column assembly of H (oracles and small problems only)."""
        eye = np.eye(self.param_grid.n)
        return np.column_stack([self.observe_array(eye[:, j]) for j in range(self.param_grid.n)])


def build_forward(
    param_grid: Grid1D,
    alpha_pde: float = DEFAULT_ALPHA_PDE,
    obs_points: tuple[float, ...] | np.ndarray = DEFAULT_OBS_POINTS,
) -> ForwardOperator:
    """Forward operator for fields on `param_grid`.

    A Neumann parameter grid shares its interior nodes with the Dirichlet PDE
    grid, so the transfer is a restriction; a Dirichlet parameter grid is
    solved on directly.
    """
    if not alpha_pde > 0:
        raise ValueError(f"alpha_pde must be positive, got {alpha_pde}")
    points = np.array(obs_points, dtype=float)
    if points.ndim != 1 or points.size == 0:
        raise ValueError("At least one observation point is required")
    if np.any(np.diff(points) <= 0):
        raise ValueError("Observation points must be strictly increasing")
    if points[0] <= 0.0 or points[-1] > 1.0:
        raise ValueError(f"Observation points must lie in (0, 1], got [{points[0]}, {points[-1]}]")

    if param_grid.boundary == Boundary.DIRICHLET:
        grid = param_grid
        transfer = sparse.identity(grid.n, format="csr")
    else:
        grid = build_grid(param_grid.n - 2, Boundary.DIRICHLET)
        transfer = interpolation_matrix(param_grid.nodes, grid.nodes)
    solver = laplacian(grid).shifted_identity(alpha_pde)
    padded_nodes = np.concatenate(([0.0], grid.nodes, [1.0]))
    obs_matrix = interpolation_matrix(padded_nodes, points)
    points.flags.writeable = False
    return ForwardOperator(
        grid=grid,
        param_grid=param_grid,
        alpha_pde=alpha_pde,
        obs_points=points,
        solver=solver,
        obs_matrix=obs_matrix,
        transfer=transfer,
    )


def generate_data(
    truth: Callable[[np.ndarray], np.ndarray],
    fine_n: int,
    coarse_F: ForwardOperator,
    noise_pct: float,
    rng_seed: int,
    *,
    tau_pct: float | None = None,
) -> DataVector:
    """Observe `truth` through a fine-mesh solve and add Gaussian noise.

    τ^-1 = (pct * max|H_fine u†|)^2 where pct is `tau_pct`, defaulting to
    `noise_pct`, or to 5% when the data are noise-free.
    """
    if fine_n <= coarse_F.param_grid.n:
        raise InverseCrimeError(
            f"Data mesh n={fine_n} must be finer than the inversion mesh n={coarse_F.param_grid.n}"
        )
    if noise_pct < 0:
        raise ValueError(f"noise_pct must be non-negative, got {noise_pct}")
    fine_grid = build_grid(fine_n, Boundary.DIRICHLET)
    fine = build_forward(fine_grid, coarse_F.alpha_pde, coarse_F.obs_points)
    clean = fine.apply_H(FieldVector.from_function(fine_grid, truth))

    if tau_pct is None:
        tau_pct = noise_pct if noise_pct > 0 else DEFAULT_NOISE_PCT
    peak = float(np.max(np.abs(clean)))
    if peak == 0.0 or tau_pct <= 0:
        raise ValueError("Cannot set the noise level from an all-zero observation")
    tau = 1.0 / (tau_pct * peak) ** 2

    d = clean
    if noise_pct > 0:
        rng = np.random.default_rng(rng_seed)
        d = clean + (noise_pct * peak) * rng.standard_normal(clean.size)
    logger.info("Generated %d observations on n=%d, tau=%.6g", d.size, fine_n, tau)
    return DataVector(d=d, tau=tau, noise_pct=noise_pct, x_obs=fine.obs_points, fine_n=fine_n)


def potential_from_obs(hv: np.ndarray, lam: float, data: DataVector) -> float:
    """½ τ ‖d - λ Hv‖² given a precomputed Hv."""
    residual = data.d - lam * hv
    return 0.5 * data.tau * float(np.dot(residual, residual))


def potential(F: ForwardOperator, v: FieldVector, lam: float, data: DataVector) -> float:
    hv = F.apply_H(v)
    if hv.shape != data.d.shape:
        raise ShapeMismatchError(f"H v has {hv.size} entries, data has {data.d.size}")
    return potential_from_obs(hv, lam, data)


def truth_elliptic1d(x: np.ndarray) -> np.ndarray:
    """u†(x) = 10 (cos 4πx + 1)."""
    return 10.0 * (np.cos(4.0 * np.pi * np.asarray(x)) + 1.0)
