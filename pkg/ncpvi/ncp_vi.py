"""Coordinate-ascent mean-field VI for the non-centered hierarchical model u = λ v."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.sparse.linalg import LinearOperator, cg

from ncpvi.discretize import FieldVector, m_norm
from ncpvi.forward import DataVector, ForwardOperator
from ncpvi.lowrank import (
    DEFAULT_OVERSAMPLE,
    DEFAULT_R_MAX,
    EigenPairs,
    LowRankPosteriorCov,
    dense_operator,
    double_pass_eig,
    gtilde_operator,
    trace_lowrank,
)
from ncpvi.prior import LambdaPrior, PriorOperator

logger = logging.getLogger(__name__)

SOLVERS = ("smw", "cg", "dense")
DENSE_MAX_N = 200
TINY = 1e-300


class SolverBreakdownError(ArithmeticError):
    """Raised when a v-update solve cannot produce a finite answer."""


@dataclass(frozen=True)
class ViConfig:
    tol: float = 1e-4
    max_iter: int = 3000
    r_max: int = DEFAULT_R_MAX
    oversample: int = DEFAULT_OVERSAMPLE
    lambda0: float | None = None
    # None starts ν^λ at the hyper-prior variance σ.
    c_lambda0: float | None = None
    solver: str = "smw"
    cg_maxiter: int = 10
    cg_rtol: float = 1e-10
    eig_seed: int = 0

    def __post_init__(self) -> None:
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.r_max < 1 or self.oversample < 0:
            raise ValueError("r_max must be >= 1 and oversample >= 0")
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {', '.join(SOLVERS)}, got {self.solver!r}")
        if self.cg_maxiter < 1:
            raise ValueError(f"cg_maxiter must be at least 1, got {self.cg_maxiter}")
        if not self.cg_rtol > 0:
            raise ValueError(f"cg_rtol must be positive, got {self.cg_rtol}")
        if self.c_lambda0 is not None and not self.c_lambda0 >= 0:
            raise ValueError(f"c_lambda0 must be non-negative, got {self.c_lambda0}")


@dataclass(frozen=True)
class LambdaPosterior:
    """ν^λ = N(λ*, C_λ). A zero variance is allowed only as the point initialization."""

    lam_star: float
    c_lambda: float

    def __post_init__(self) -> None:
        if not (self.c_lambda >= 0 and math.isfinite(self.c_lambda)):
            raise ValueError(f"c_lambda must be finite and non-negative, got {self.c_lambda}")
        if not math.isfinite(self.lam_star):
            raise ValueError("lam_star must be finite")
        if not self.rho > 0:
            raise ValueError("C_λ + (λ*)² must be positive")

    @property
    def rho(self) -> float:
        return self.c_lambda + self.lam_star**2


@dataclass(frozen=True, eq=False)
class VPosterior:
    """ν^v = N(v*, C_v) with C_v in low-rank form."""

    v_star: FieldVector
    cov: LowRankPosteriorCov


@dataclass(frozen=True)
class ViRecord:
    iteration: int
    lam: float
    c_lambda: float
    rel_err: float | None
    step_norm: float
    lam_step: float


@dataclass
class ViTrace:
    records: list[ViRecord] = field(default_factory=list)

    def append(self, record: ViRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(rec, name) for rec in self.records], dtype=float)


@dataclass(frozen=True, eq=False)
class ViResult:
    v_post: VPosterior
    lam_post: LambdaPosterior
    trace: ViTrace
    converged: bool
    eig: EigenPairs

    @property
    def n_iter(self) -> int:
        return len(self.trace)

    def u_star(self) -> FieldVector:
        return FieldVector(self.lam_post.lam_star * self.v_post.v_star.values, self.v_post.v_star.grid)


def compute_eigenpairs(
    prior: PriorOperator, F: ForwardOperator, data: DataVector, cfg: ViConfig
) -> EigenPairs:
    """Eigenpairs of G̃; λ-independent, so computed once per run."""
    oversample = min(cfg.oversample, prior.grid.n - cfg.r_max)
    matvec = gtilde_operator(prior, F, data.tau)
    return double_pass_eig(matvec, prior.grid, cfg.r_max, max(oversample, 0), cfg.eig_seed)


def _whitened_rhs(prior: PriorOperator, F: ForwardOperator, data: DataVector, lam: float) -> np.ndarray:
    # C0^½ (λ* τ H* d)
    return prior.sqrt_array(lam * data.tau * F.adjoint_array(data.d))


def _solve_cg(
    prior: PriorOperator,
    F: ForwardOperator,
    data: DataVector,
    cov: LowRankPosteriorCov,
    rhs: np.ndarray,
    cfg: ViConfig,
) -> np.ndarray:
    # (I + ρ G̃) z = rhs is self-adjoint in ⟨·,·⟩_M = h⟨·,·⟩, hence symmetric for plain CG.
    # The low-rank inverse is exact on the retained eigenvectors and preconditions the rest.
    gtilde = gtilde_operator(prior, F, data.tau)
    n = prior.grid.n
    op = LinearOperator((n, n), matvec=lambda x: x + cov.rho * gtilde(np.ravel(x)), dtype=float)
    precond = LinearOperator((n, n), matvec=lambda x: cov.whitened_apply(np.ravel(x)), dtype=float)
    z, info = cg(
        op, rhs, x0=cov.whitened_apply(rhs), rtol=cfg.cg_rtol, atol=0.0, maxiter=cfg.cg_maxiter, M=precond
    )
    if info < 0 or not np.all(np.isfinite(z)):
        raise SolverBreakdownError(f"Conjugate gradients broke down (info={info})")
    if info > 0:
        logger.debug("CG stopped after %d iterations above rtol=%g", info, cfg.cg_rtol)
    return z


def _solve_dense(
    prior: PriorOperator, F: ForwardOperator, data: DataVector, lam_post: LambdaPosterior
) -> np.ndarray:
    n = prior.grid.n
    if n > DENSE_MAX_N:
        raise ValueError(f"Dense v-update is limited to n <= {DENSE_MAX_N}, got {n}")
    H = F.dense_matrix()
    system = (lam_post.rho * data.tau / prior.grid.h) * (H.T @ H) + dense_operator(prior.inv_array, n)
    rhs = lam_post.lam_star * data.tau * F.adjoint_array(data.d)
    try:
        return linalg.solve(system, rhs, assume_a="pos")
    except linalg.LinAlgError as exc:
        raise SolverBreakdownError(f"Dense v-update failed: {exc}") from exc


def update_v(
    prior: PriorOperator,
    F: ForwardOperator,
    data: DataVector,
    lam_post: LambdaPosterior,
    *,
    eig: EigenPairs | None = None,
    cfg: ViConfig | None = None,
) -> VPosterior:
    """Solve (ρ H*τH + C0^-1) v* = λ* τ H* d with ρ = C_λ + (λ*)²."""
    cfg = cfg or ViConfig()
    if eig is None:
        eig = compute_eigenpairs(prior, F, data, cfg)
    cov = LowRankPosteriorCov(prior, eig, lam_post.rho)

    if cfg.solver == "dense":
        v_star = _solve_dense(prior, F, data, lam_post)
    else:
        rhs = _whitened_rhs(prior, F, data, lam_post.lam_star)
        if cfg.solver == "cg":
            z = _solve_cg(prior, F, data, cov, rhs, cfg)
        else:
            z = cov.whitened_apply(rhs)
        v_star = prior.sqrt_array(z)
    if not np.all(np.isfinite(v_star)):
        raise SolverBreakdownError("v-update produced non-finite values")
    return VPosterior(v_star=FieldVector(v_star, prior.grid), cov=cov)


def update_lambda(
    prior_lam: LambdaPrior, F: ForwardOperator, data: DataVector, v_post: VPosterior
) -> LambdaPosterior:
    """C_λ^-1 = Tr(C_v H*Γ^-1 H) + τ‖Hv*‖² + 1/σ,  λ* = C_λ (τ⟨Hv*, d⟩ + λ̄/σ)."""
    trace = trace_lowrank(v_post.cov.eig, v_post.cov.rho)
    hv = F.observe_array(v_post.v_star.values)
    precision = trace + data.tau * float(np.dot(hv, hv)) + 1.0 / prior_lam.variance
    assert precision > 0, "λ precision must be positive"
    c_lambda = 1.0 / precision
    lam_star = c_lambda * (data.tau * float(np.dot(hv, data.d)) + prior_lam.mean / prior_lam.variance)
    return LambdaPosterior(lam_star=lam_star, c_lambda=c_lambda)


def _relative_change(new: float, old: float) -> float:
    return new / old if old >= TINY else new


def run_vi(
    prior: PriorOperator,
    lam_prior: LambdaPrior,
    F: ForwardOperator,
    data: DataVector,
    cfg: ViConfig,
    truth: FieldVector | None = None,
) -> ViResult:
    """Alternate the v and λ updates from ν^λ_0 = N(λ̄, σ) until both steps fall below tol.

    `cfg.lambda0` and `cfg.c_lambda0` override the start; any C_λ,0 >= 0 reaches the same
    fixed point, but a point start (C_λ,0 = 0) needs far more sweeps on informative data.
    """
    grid = prior.grid
    if truth is not None:
        grid.require(truth.grid, "truth")
        truth_norm = m_norm(grid, truth.values)
    eig = compute_eigenpairs(prior, F, data, cfg)

    lam0 = lam_prior.mean if cfg.lambda0 is None else cfg.lambda0
    c0 = lam_prior.variance if cfg.c_lambda0 is None else cfg.c_lambda0
    lam_post = LambdaPosterior(lam_star=lam0, c_lambda=c0)
    prev_u = np.zeros(grid.n)
    trace = ViTrace()
    converged = False
    v_post = None

    for k in range(1, cfg.max_iter + 1):
        prev_lam = lam_post.lam_star
        v_post = update_v(prior, F, data, lam_post, eig=eig, cfg=cfg)
        lam_post = update_lambda(lam_prior, F, data, v_post)

        u = lam_post.lam_star * v_post.v_star.values
        step = _relative_change(m_norm(grid, u - prev_u), m_norm(grid, u))
        lam_step = _relative_change(abs(lam_post.lam_star - prev_lam), abs(prev_lam))
        rel_err = None
        if truth is not None:
            rel_err = (m_norm(grid, u - truth.values) / truth_norm) ** 2
        trace.append(ViRecord(k, lam_post.lam_star, lam_post.c_lambda, rel_err, step, lam_step))
        prev_u = u

        if max(step, lam_step) <= cfg.tol:
            converged = True
            break

    if converged:
        logger.info("VI converged after %d iterations: lambda*=%.6f C_lambda=%.6f",
                    len(trace), lam_post.lam_star, lam_post.c_lambda)
    else:
        logger.warning("VI stopped at max_iter=%d without meeting tol=%g", cfg.max_iter, cfg.tol)
    return ViResult(v_post=v_post, lam_post=lam_post, trace=trace, converged=converged, eig=eig)
