"""Posterior comparisons: relative errors, λ KL, covariance fields and bands, mesh studies."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from scipy import linalg, stats

from ncpvi.discretize import Boundary, FieldVector, build_grid, m_norm
from ncpvi.forward import DataVector, InverseCrimeError, build_forward
from ncpvi.lowrank import EigenPairs
from ncpvi.ncp_vi import LambdaPosterior, VPosterior, ViConfig, ViTrace, run_vi
from ncpvi.prior import LambdaPrior, build_prior

logger = logging.getLogger(__name__)

DEFAULT_BAND_OFFSETS = (0, 20, 40, 50)


def relative_error(u_est: FieldVector, u_truth: FieldVector) -> float:
    """‖u_est - u_truth‖²_M / ‖u_truth‖²_M."""
    grid = u_truth.grid
    grid.require(u_est.grid, "estimate")
    denom = m_norm(grid, u_truth.values) ** 2
    if denom == 0.0:
        raise ValueError("Reference field has zero norm")
    return m_norm(grid, u_est.values - u_truth.values) ** 2 / denom


def mean_relative_error(u_vi: FieldVector, u_gibbs: FieldVector) -> float:
    """Squared relative distance of the VI posterior mean from the sampled one."""
    return relative_error(u_vi, u_gibbs)


def kl_gaussian_1d(p: tuple[float, float], q: tuple[float, float]) -> float:
    """KL(N(p) ‖ N(q)) for (mean, variance) pairs."""
    mean_p, var_p = p
    mean_q, var_q = q
    if not (var_p > 0 and var_q > 0):
        raise ValueError(f"Variances must be positive, got {var_p} and {var_q}")
    return 0.5 * math.log(var_q / var_p) + (var_p - var_q) / (2.0 * var_q) + (mean_p - mean_q) ** 2 / (2.0 * var_q)


@dataclass(frozen=True, eq=False)
class CovarianceField:
    """c_u(x_i, x_j) = ρ (c0_ij - Σ_k d_k ṽ_k(x_i) ṽ_k(x_j)) + C_λ v*_i v*_j."""

    c0: np.ndarray
    tilde: np.ndarray
    dr: np.ndarray
    rho: float
    c_lambda: float
    v_star: np.ndarray

    @property
    def n(self) -> int:
        return int(self.v_star.size)

    def entry(self, i: int, j: int) -> float:
        correction = float(np.sum(self.dr * (self.tilde[i] * self.tilde[j])))
        return self.rho * (self.c0[i, j] - correction) + self.c_lambda * self.v_star[i] * self.v_star[j]

    def band(self, k: int) -> np.ndarray:
        if not 0 <= k < self.n:
            raise ValueError(f"Band offset must lie in [0, {self.n}), got {k}")
        lo, hi = self.tilde[: self.n - k], self.tilde[k:]
        correction = np.sum(self.dr * (lo * hi), axis=1)
        c0_band = np.diagonal(self.c0, offset=k)
        return self.rho * (c0_band - correction) + self.c_lambda * self.v_star[: self.n - k] * self.v_star[k:]

    def variance(self) -> np.ndarray:
        return self.band(0)

    def dense(self) -> np.ndarray:
        low_rank = (self.tilde * self.dr) @ self.tilde.T
        cov = self.rho * (self.c0 - low_rank) + self.c_lambda * np.outer(self.v_star, self.v_star)
        return 0.5 * (cov + cov.T)


def u_posterior_moments(v_post: VPosterior, lam_post: LambdaPosterior) -> tuple[FieldVector, CovarianceField]:
    """Mean λ*v* and covariance (C_λ + λ*²) C_v + C_λ v* v*ᵀ of u = λv under ν^v ⊗ ν^λ."""
    cov = v_post.cov
    v_star = v_post.v_star
    mean = FieldVector(lam_post.lam_star * v_star.values, v_star.grid)
    field_ = CovarianceField(
        c0=cov.prior.dense_covariance(),
        tilde=cov.tilde_vectors(),
        dr=cov.dr,
        rho=lam_post.rho,
        c_lambda=lam_post.c_lambda,
        v_star=np.asarray(v_star.values),
    )
    return mean, field_


def covariance_bands(cov: CovarianceField | np.ndarray, offsets: Iterable[int]) -> dict[int, np.ndarray]:
    """{c(x_i, x_{i+k})} for each offset k, from a covariance field or a dense matrix."""
    n = cov.n if isinstance(cov, CovarianceField) else cov.shape[0]
    out: dict[int, np.ndarray] = {}
    for k in offsets:
        if not 0 <= k < n:
            raise ValueError(f"Band offset must lie in [0, {n}), got {k}")
        out[k] = cov.band(k) if isinstance(cov, CovarianceField) else np.diagonal(cov, offset=k).copy()
    return out


def credibility_band(
    mean: FieldVector, variance: FieldVector | np.ndarray, level: float = 0.95
) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean ± z σ with z the two-sided normal quantile."""
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    var = np.asarray(variance.values if isinstance(variance, FieldVector) else variance, dtype=float)
    if var.shape != mean.values.shape:
        raise ValueError(f"Variance has shape {var.shape}, mean has {mean.values.shape}")
    if np.any(var < 0):
        raise ValueError("Variance entries must be non-negative")
    z = float(stats.norm.ppf(0.5 + 0.5 * level))
    half = z * np.sqrt(var)
    return mean.values - half, mean.values + half


def coverage_fraction(truth: FieldVector, lower: np.ndarray, upper: np.ndarray) -> float:
    inside = (truth.values >= lower) & (truth.values <= upper)
    return float(np.mean(inside))


def matrix_relative_error(c_vi: np.ndarray, c_gibbs: np.ndarray) -> float:
    """‖c_VI - c_G‖²_F / ‖c_VI‖²_F."""
    if c_vi.shape != c_gibbs.shape:
        raise ValueError(f"Covariance shapes differ: {c_vi.shape} vs {c_gibbs.shape}")
    denom = float(np.sum(c_vi * c_vi))
    if denom == 0.0:
        raise ValueError("Reference covariance is zero")
    diff = c_vi - c_gibbs
    return float(np.sum(diff * diff)) / denom


def band_relative_errors(
    vi_bands: Mapping[int, np.ndarray], gibbs_bands: Mapping[int, np.ndarray]
) -> dict[int, float]:
    """Per offset ‖b_VI - b_G‖² / ‖b_G‖² over offsets present in both."""
    out: dict[int, float] = {}
    for k in sorted(set(vi_bands) & set(gibbs_bands)):
        ref = np.asarray(gibbs_bands[k])
        diff = np.asarray(vi_bands[k]) - ref
        out[k] = float(np.dot(diff, diff) / np.dot(ref, ref))
    return out


def count_informed_eigenvalues(eig: EigenPairs, rho: float) -> int:
    """Number of retained modes with ρξ ≥ 1."""
    return int(np.count_nonzero(rho * eig.xis >= 1.0))


def cp_ncp_density_check(n_small: int, rng: np.random.Generator, n_points: int = 1000) -> float:
    """Max spread of log p_CP(λv, λ) - (log p_NCP(v, λ) - N log|λ|) over random points.

    The centered density uses u | λ ~ N(0, λ² C0); the non-centered one
    uses v ~ N(0, C0) independent of λ. Points with λ ≤ 0 are skipped.
    """
    if not 1 <= n_small <= 10:
        raise ValueError(f"n_small must lie in [1, 10], got {n_small}")
    n_obs = n_small + 2
    H = rng.standard_normal((n_obs, n_small))
    B = rng.standard_normal((n_small, n_small))
    c0 = B @ B.T / n_small + np.eye(n_small)
    d = rng.standard_normal(n_obs)
    tau = 1.0
    lam_prior = LambdaPrior(mean=1.0, variance=4.0)
    c0_factor = linalg.cho_factor(c0)

    def log_ncp(v: np.ndarray, lam: float) -> float:
        residual = d - lam * (H @ v)
        quad = float(v @ linalg.cho_solve(c0_factor, v))
        return -0.5 * tau * float(residual @ residual) - 0.5 * quad + lam_prior.log_density(lam)

    def log_cp(u: np.ndarray, lam: float) -> float:
        cov = lam**2 * c0
        _, logdet = np.linalg.slogdet(cov)
        residual = d - H @ u
        quad = float(u @ linalg.solve(cov, u, assume_a="pos"))
        return -0.5 * tau * float(residual @ residual) - 0.5 * quad - 0.5 * logdet + lam_prior.log_density(lam)

    deltas = []
    skipped = 0
    for _ in range(n_points):
        v = rng.standard_normal(n_small)
        lam = float(rng.normal(1.0, 1.0))
        if lam <= 0:
            skipped += 1
            continue
        deltas.append(log_cp(lam * v, lam) - (log_ncp(v, lam) - n_small * math.log(abs(lam))))
    if not deltas:
        raise ValueError("Every sampled point had a non-positive scale")
    if skipped:
        logger.debug("Skipped %d of %d points with non-positive scale", skipped, n_points)
    deltas_arr = np.array(deltas)
    return float(np.max(np.abs(deltas_arr - deltas_arr[0])))


@dataclass(frozen=True)
class MeshRow:
    mesh: int
    lambda_mean: float
    lambda_var: float
    n_iter: int
    converged: bool


@dataclass(frozen=True, eq=False)
class MeshStudy:
    rows: list[MeshRow]
    traces: dict[int, ViTrace] = field(default_factory=dict)

    def lambda_spread(self) -> float:
        """(max - min) / mean of λ* across meshes."""
        lams = np.array([row.lambda_mean for row in self.rows])
        return float((lams.max() - lams.min()) / lams.mean())


def step_norm_overlay_ratio(traces: Mapping[int, ViTrace]) -> float:
    """Largest max/min ratio of step norms across meshes over their common iterations."""
    curves = [trace.column("step_norm") for trace in traces.values()]
    if len(curves) < 2:
        return 1.0
    length = min(curve.size for curve in curves)
    stacked = np.vstack([curve[:length] for curve in curves])
    lo = np.maximum(stacked.min(axis=0), 1e-300)
    return float(np.max(stacked.max(axis=0) / lo))


def mesh_independence_study(
    mesh_sizes: Iterable[int],
    data: DataVector,
    cfg: ViConfig,
    *,
    lam_prior: LambdaPrior,
    alpha: float,
    alpha_pde: float,
    prior_scale: float = 1.0,
    workers: int = 1,
) -> MeshStudy:
    """Run VI on each mesh against the same data; rows come back in mesh order."""
    sizes = list(mesh_sizes)
    for n in sizes:
        if n >= data.fine_n:
            raise InverseCrimeError(f"Mesh n={n} is not coarser than the data mesh n={data.fine_n}")

    def run_one(n: int):
        grid = build_grid(n, Boundary.NEUMANN)
        prior = build_prior(grid, alpha, prior_scale)
        F = build_forward(grid, alpha_pde, data.x_obs)
        logger.info("Mesh study: running n=%d", n)
        return run_vi(prior, lam_prior, F, data, cfg)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(run_one, sizes))

    rows = [
        MeshRow(n, res.lam_post.lam_star, res.lam_post.c_lambda, res.n_iter, res.converged)
        for n, res in zip(sizes, results)
    ]
    return MeshStudy(rows=rows, traces={n: res.trace for n, res in zip(sizes, results)})
