"""Randomized double-pass eigensolver, Sherman-Morrison-Woodbury posterior covariance, low-rank trace."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
from scipy import linalg

from ncpvi.discretize import BandedSpdMatrix, FieldVector, Grid1D, mass_weights
from ncpvi.forward import ForwardOperator
from ncpvi.prior import PriorOperator

logger = logging.getLogger(__name__)

DEFAULT_R_MAX = 10
DEFAULT_OVERSAMPLE = 10
DROP_TOL = 1e-12

Matvec = Callable[[np.ndarray], np.ndarray]
MapFn = Callable[[Matvec, Iterable[np.ndarray]], Iterable[np.ndarray]]


class EigenSolverError(ValueError):
    """Raised for an eigensolver request the grid cannot support."""


@dataclass(frozen=True, eq=False)
class EigenPairs:
    """Descending eigenvalues with M-orthonormal eigenvectors stored column-wise."""

    xis: np.ndarray
    vecs: np.ndarray
    grid: Grid1D
    rank_deficient: bool = False

    def __post_init__(self) -> None:
        xis = np.array(self.xis, dtype=float)
        vecs = np.array(self.vecs, dtype=float).reshape(self.grid.n, xis.size)
        if np.any(xis < 0) or np.any(np.diff(xis) > 0):
            raise ValueError("Eigenvalues must be non-negative and descending")
        xis.flags.writeable = False
        vecs.flags.writeable = False
        object.__setattr__(self, "xis", xis)
        object.__setattr__(self, "vecs", vecs)

    @property
    def rank(self) -> int:
        return int(self.xis.size)

    def vector(self, i: int) -> FieldVector:
        return FieldVector(self.vecs[:, i], self.grid)

    def truncated(self, r: int) -> EigenPairs:
        return EigenPairs(self.xis[:r], self.vecs[:, :r], self.grid, self.rank_deficient)

    @classmethod
    def empty(cls, grid: Grid1D) -> EigenPairs:
        return cls(np.zeros(0), np.zeros((grid.n, 0)), grid)


@dataclass(frozen=True, eq=False)
class LowRankPosteriorCov:
    """C_v = C0^½ (I - V D V^⋄) C0^½ with d_i = ρξ_i / (ρξ_i + 1) and V^⋄ = Vᵀ M."""

    prior: PriorOperator
    eig: EigenPairs
    rho: float
    dr: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        scaled = self.rho * self.eig.xis
        dr = scaled / (scaled + 1.0)
        dr.flags.writeable = False
        object.__setattr__(self, "dr", dr)

    def _project(self, x: np.ndarray) -> np.ndarray:
        # V D V^⋄ x with the lumped mass M = hI.
        coeffs = self.eig.vecs.T @ (self.prior.grid.h * x)
        return self.eig.vecs @ (self.dr * coeffs)

    def whitened_apply(self, x: np.ndarray) -> np.ndarray:
        """(I + ρ G̃)^-1 x, exact on the span of the retained eigenvectors."""
        return x - self._project(x)

    def apply_array(self, x: np.ndarray) -> np.ndarray:
        y = self.prior.sqrt_array(x)
        return self.prior.sqrt_array(self.whitened_apply(y))

    def apply(self, f: FieldVector) -> FieldVector:
        self.prior.grid.require(f.grid)
        return FieldVector(self.apply_array(f.values), self.prior.grid)

    def sample(self, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        """Draw from N(0, C_v) via C0^½ (I - V (I - (I-D)^½) V^⋄) w, w ~ N(0, M^-1).

        With `size` the draws are returned column-wise, shape (n, size).
        """
        n = self.prior.grid.n
        shape = n if size is None else (n, size)
        white = rng.standard_normal(shape) / math.sqrt(self.prior.grid.h)
        shrink = 1.0 - np.sqrt(1.0 - self.dr)
        coeffs = self.eig.vecs.T @ (self.prior.grid.h * white)
        return self.prior.sqrt_array(white - self.eig.vecs @ (shrink * coeffs.T).T)

    def tilde_vectors(self) -> np.ndarray:
        """Columns ṽ_k = C0^½ v_k."""
        if self.eig.rank == 0:
            return np.zeros((self.prior.grid.n, 0))
        return self.prior.sqrt_array(self.eig.vecs)


def gtilde_operator(prior: PriorOperator, F: ForwardOperator, tau: float) -> Matvec:
    """Array matvec of G̃ = C0^½ H* τ H C0^½."""
    prior.grid.require(F.param_grid, "forward parameter grid")

    def matvec(x: np.ndarray) -> np.ndarray:
        y = prior.sqrt_array(x)
        return prior.sqrt_array(F.adjoint_array(tau * F.observe_array(y)))

    return matvec


def gtilde_matvec(prior: PriorOperator, F: ForwardOperator, tau: float, f: FieldVector) -> FieldVector:
    prior.grid.require(f.grid)
    return FieldVector(gtilde_operator(prior, F, tau)(f.values), prior.grid)


def m_orthonormalize(
    Y: np.ndarray, mass: BandedSpdMatrix, drop_tol: float = DROP_TOL
) -> np.ndarray:
    """Modified Gram-Schmidt in ⟨·,·⟩_M with one reorthogonalization pass.

    Columns whose residual falls below `drop_tol` times the largest input
    M-norm are dropped.
    """
    n, k = Y.shape
    norms = np.sqrt(np.einsum("ij,ij->j", Y, mass.matvec(Y)))
    scale = float(norms.max()) if k else 0.0
    basis: list[np.ndarray] = []
    mbasis: list[np.ndarray] = []
    if scale == 0.0:
        return np.zeros((n, 0))
    for j in range(k):
        y = Y[:, j].copy()
        for _ in range(2):
            for q, mq in zip(basis, mbasis):
                y -= np.dot(mq, y) * q
        my = mass.matvec(y)
        norm = math.sqrt(max(float(np.dot(y, my)), 0.0))
        if norm <= drop_tol * scale:
            continue
        basis.append(y / norm)
        mbasis.append(my / norm)
    if not basis:
        return np.zeros((n, 0))
    return np.column_stack(basis)


def double_pass_eig(
    matvec: Matvec,
    grid: Grid1D,
    r: int,
    oversample: int = DEFAULT_OVERSAMPLE,
    rng_seed: int = 0,
    *,
    map_fn: MapFn = map,
) -> EigenPairs:
    """Top-r eigenpairs of an M-self-adjoint PSD operator from 2(r + oversample) matvecs.

    `map_fn` applies the matvec over a batch of columns and may run them
    concurrently.
    """
    k = r + oversample
    if r < 1 or oversample < 0:
        raise EigenSolverError(f"Need r >= 1 and oversample >= 0, got r={r}, oversample={oversample}")
    if k > grid.n:
        raise EigenSolverError(f"r + oversample = {k} exceeds the grid size {grid.n}")
    mass = mass_weights(grid)
    rng = np.random.default_rng(rng_seed)
    omega = rng.standard_normal((grid.n, k))

    Y = np.column_stack(list(map_fn(matvec, omega.T)))
    Q = m_orthonormalize(Y, mass)
    if Q.shape[1] == 0:
        logger.info("Double-pass sampling found an empty range")
        return EigenPairs(np.zeros(0), np.zeros((grid.n, 0)), grid, rank_deficient=True)

    GQ = np.column_stack(list(map_fn(matvec, Q.T)))
    T = Q.T @ mass.matvec(GQ)
    T = 0.5 * (T + T.T)
    vals, U = linalg.eigh(T)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = Q @ U[:, order]

    kept = min(r, vals.size)
    rank_deficient = Q.shape[1] < r
    if vals.size:
        logger.info("Double-pass spectrum: %.6e to %.6e (%d pairs)", vals[0], vals[kept - 1], kept)
    return EigenPairs(vals[:kept], vecs[:, :kept], grid, rank_deficient=rank_deficient)


def trace_lowrank(eig: EigenPairs, rho: float) -> float:
    """Σ ξ_i / (ρξ_i + 1) over the retained pairs."""
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    return float(np.sum(eig.xis / (rho * eig.xis + 1.0)))


def smw_apply(cov: LowRankPosteriorCov, f: FieldVector) -> FieldVector:
    return cov.apply(f)


def dense_operator(matvec: Matvec, n: int) -> np.ndarray:
    eye = np.eye(n)
    return np.column_stack([matvec(eye[:, j]) for j in range(n)])


def dense_posterior_covariance(
    prior: PriorOperator, F: ForwardOperator, tau: float, rho: float
) -> np.ndarray:
    """(ρ H* τ H + C0^-1)^-1 as a matrix acting on nodal vectors."""
    n = prior.grid.n
    H = F.dense_matrix()
    misfit = (tau / prior.grid.h) * (H.T @ H)
    c0_inv = dense_operator(prior.inv_array, n)
    return linalg.inv(rho * misfit + c0_inv)


def dense_gtilde(prior: PriorOperator, F: ForwardOperator, tau: float) -> np.ndarray:
    return dense_operator(gtilde_operator(prior, F, tau), prior.grid.n)
