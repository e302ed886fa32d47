"""Non-centered pCN-within-Gibbs sampler for (v, λ)."""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ncpvi.discretize import FieldVector
from ncpvi.forward import DataVector, ForwardOperator, ShapeMismatchError, potential_from_obs
from ncpvi.prior import LambdaPrior, PriorOperator

logger = logging.getLogger(__name__)

FULL_COV_MAX_N = 200
DEFAULT_BAND_OFFSETS = (20, 40, 50)


@dataclass(frozen=True)
class GibbsConfig:
    beta: float = 0.02
    n_samples: int = 100_000
    burn_in: int = 10_000
    thin: int = 10
    rng_seed: int = 0
    n_chains: int = 1
    max_seconds: float | None = None
    band_offsets: tuple[int, ...] = DEFAULT_BAND_OFFSETS

    def __post_init__(self) -> None:
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")
        if self.n_samples < 1 or not 0 <= self.burn_in < self.n_samples:
            raise ValueError(
                f"Need 0 <= burn_in < n_samples, got burn_in={self.burn_in}, n_samples={self.n_samples}"
            )
        if self.thin < 1 or self.n_chains < 1:
            raise ValueError("thin and n_chains must be at least 1")


@dataclass(frozen=True, eq=False)
class ChainState:
    """Current (v, λ) with the cached observation Hv."""

    v: np.ndarray
    lam: float
    hv: np.ndarray

    @classmethod
    def start(cls, prior: PriorOperator, F: ForwardOperator, lam: float, rng: np.random.Generator) -> ChainState:
        v = prior.sample(rng)
        return cls(v=v, lam=lam, hv=F.observe_array(v))


def fold_sign(state: ChainState, data: DataVector) -> ChainState:
    """Map (v, λ) to the sign-equivalent (-v, -λ) with ⟨d, Hv⟩ >= 0; u = λv is unchanged."""
    if float(np.dot(data.d, state.hv)) < 0:
        return ChainState(v=-state.v, lam=-state.lam, hv=-state.hv)
    return state


class ChainAccumulator:
    """Streaming mean/covariance of u = λv and of λ with an associative merge."""

    def __init__(self, n: int, band_offsets: tuple[int, ...] = DEFAULT_BAND_OFFSETS) -> None:
        self.n = n
        self.offsets = tuple(k for k in band_offsets if 0 < k < n)
        self.full = n <= FULL_COV_MAX_N
        self.count = 0
        self.mean = np.zeros(n)
        self.m2_diag = np.zeros(n)
        self.m2_full = np.zeros((n, n)) if self.full else None
        self.m2_bands = {k: np.zeros(n - k) for k in self.offsets}
        self.lam_mean = 0.0
        self.lam_m2 = 0.0

    def push(self, u: np.ndarray, lam: float) -> None:
        self.count += 1
        delta = u - self.mean
        self.mean += delta / self.count
        delta2 = u - self.mean
        self.m2_diag += delta * delta2
        if self.m2_full is not None:
            self.m2_full += np.outer(delta, delta2)
        for k, band in self.m2_bands.items():
            band += delta[:-k] * delta2[k:]
        lam_delta = lam - self.lam_mean
        self.lam_mean += lam_delta / self.count
        self.lam_m2 += lam_delta * (lam - self.lam_mean)

    def merge(self, other: ChainAccumulator) -> ChainAccumulator:
        out = ChainAccumulator(self.n, self.offsets)
        total = self.count + other.count
        out.count = total
        if total == 0:
            return out
        w = self.count * other.count / total
        delta = other.mean - self.mean
        out.mean = self.mean + delta * (other.count / total)
        out.m2_diag = self.m2_diag + other.m2_diag + w * delta * delta
        if out.m2_full is not None:
            out.m2_full = self.m2_full + other.m2_full + w * np.outer(delta, delta)
        for k in out.offsets:
            out.m2_bands[k] = self.m2_bands[k] + other.m2_bands[k] + w * delta[:-k] * delta[k:]
        lam_delta = other.lam_mean - self.lam_mean
        out.lam_mean = self.lam_mean + lam_delta * (other.count / total)
        out.lam_m2 = self.lam_m2 + other.lam_m2 + w * lam_delta**2
        return out

    def covariance(self) -> np.ndarray | None:
        if self.m2_full is None or self.count < 2:
            return None
        cov = self.m2_full / (self.count - 1)
        return 0.5 * (cov + cov.T)

    def variance(self) -> np.ndarray:
        return self.m2_diag / max(self.count - 1, 1)

    def bands(self) -> dict[int, np.ndarray]:
        denom = max(self.count - 1, 1)
        out = {0: self.variance()}
        out.update({k: band / denom for k, band in self.m2_bands.items()})
        return out

    def lambda_variance(self) -> float:
        return self.lam_m2 / max(self.count - 1, 1)


@dataclass(frozen=True, eq=False)
class ChainSummary:
    mean_u: FieldVector
    cov_u: np.ndarray | None
    var_u: np.ndarray
    bands: dict[int, np.ndarray]
    lambda_mean: float
    lambda_var: float
    acceptance_rate_v: float
    ess_lambda: float
    n_kept: int
    truncated: bool = False
    lambda_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))


def pcn_v_step(
    state: ChainState,
    prior: PriorOperator,
    F: ForwardOperator,
    data: DataVector,
    beta: float,
    rng: np.random.Generator,
) -> tuple[ChainState, bool]:
    """pCN proposal sqrt(1-β²) v + β ζ, ζ ~ N(0, C0); rejection keeps v."""
    zeta = prior.sample(rng)
    proposal = math.sqrt(1.0 - beta * beta) * state.v + beta * zeta
    hv_prop = F.observe_array(proposal)
    log_ratio = potential_from_obs(state.hv, state.lam, data) - potential_from_obs(hv_prop, state.lam, data)
    if log_ratio >= 0 or math.log(rng.uniform()) < log_ratio:
        return replace(state, v=proposal, hv=hv_prop), True
    return state, False


def lambda_conditional(hv: np.ndarray, data: DataVector, lam_prior: LambdaPrior) -> tuple[float, float]:
    """Mean and variance of λ | v: 1/σ_k = τ‖Hv‖² + 1/σ, λ̄_k = σ_k (τ⟨d, Hv⟩ + λ̄/σ)."""
    var = 1.0 / (data.tau * float(np.dot(hv, hv)) + 1.0 / lam_prior.variance)
    mean = var * (data.tau * float(np.dot(data.d, hv)) + lam_prior.mean / lam_prior.variance)
    return mean, var


def lambda_log_acceptance(
    lam: float, proposal: float, hv: np.ndarray, data: DataVector, lam_prior: LambdaPrior
) -> float:
    """Log Metropolis-Hastings ratio for an independence proposal from the exact conditional."""
    mean, var = lambda_conditional(hv, data, lam_prior)

    def log_target(x: float) -> float:
        return -potential_from_obs(hv, x, data) + lam_prior.log_density(x)

    def log_proposal(x: float) -> float:
        return -0.5 * (x - mean) ** 2 / var

    return (log_target(proposal) - log_target(lam)) + (log_proposal(lam) - log_proposal(proposal))


def lambda_gibbs_step(
    state: ChainState, F: ForwardOperator, data: DataVector, lam_prior: LambdaPrior, rng: np.random.Generator
) -> float:
    """Draw λ from its exact conditional; the general ratio is kept and evaluates to 1."""
    if state.hv.shape != (F.n_obs,):
        raise ShapeMismatchError(f"Cached Hv has shape {state.hv.shape}, forward map observes {F.n_obs} points")
    mean, var = lambda_conditional(state.hv, data, lam_prior)
    proposal = mean + math.sqrt(var) * rng.standard_normal()
    log_ratio = lambda_log_acceptance(state.lam, proposal, state.hv, data, lam_prior)
    if log_ratio >= 0 or math.log(rng.uniform()) < log_ratio:
        return proposal
    return state.lam


def effective_sample_size(x: np.ndarray) -> float:
    """ESS from the initial positive sequence of autocorrelation pairs."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return float(n)
    centered = x - x.mean()
    var = float(np.dot(centered, centered)) / n
    if var == 0.0:
        return float(n)
    size = 1 << (2 * n - 1).bit_length()
    spectrum = np.fft.rfft(centered, size)
    acf = np.fft.irfft(spectrum * np.conj(spectrum), size)[:n] / (n * var)
    total = 0.0
    for t in range(0, n - 1, 2):
        pair = acf[t] + acf[t + 1]
        if pair <= 0:
            break
        total += pair
    tau_int = max(2.0 * total - 1.0, 1.0)
    return float(n / tau_int)


def _run_single(
    prior: PriorOperator,
    lam_prior: LambdaPrior,
    F: ForwardOperator,
    data: DataVector,
    cfg: GibbsConfig,
    seed: np.random.SeedSequence,
    trace_path: Path | None,
    header: str = "",
) -> tuple[ChainAccumulator, np.ndarray, int, int, bool]:
    rng = np.random.default_rng(seed)
    state = ChainState.start(prior, F, lam_prior.mean, rng)
    acc = ChainAccumulator(prior.grid.n, cfg.band_offsets)
    lam_trace: list[float] = []
    accepted = 0
    started = time.monotonic()
    truncated = False
    steps = 0

    handle = trace_path.open("w", encoding="utf-8", newline="") if trace_path else None
    try:
        writer = csv.writer(handle, lineterminator="\n") if handle else None
        if handle:
            handle.write(header)
            writer.writerow(["iter", "lambda"])
        for it in range(cfg.n_samples):
            state, ok = pcn_v_step(state, prior, F, data, cfg.beta, rng)
            accepted += ok
            state = replace(state, lam=lambda_gibbs_step(state, F, data, lam_prior, rng))
            steps += 1
            if it % cfg.thin == 0:
                # λ is reported in the ⟨d, Hv⟩ >= 0 branch of the (v, λ) -> (-v, -λ) symmetry.
                kept = fold_sign(state, data)
                if writer:
                    writer.writerow([it, format(kept.lam, ".17g")])
                if it >= cfg.burn_in:
                    acc.push(kept.lam * kept.v, kept.lam)
                    lam_trace.append(kept.lam)
            if cfg.max_seconds is not None and it % 1000 == 0 and time.monotonic() - started > cfg.max_seconds:
                truncated = True
                logger.warning("Chain stopped by the %.1fs budget after %d steps", cfg.max_seconds, steps)
                break
    finally:
        if handle:
            handle.close()
    return acc, np.array(lam_trace), accepted, steps, truncated


def _summarize(
    prior: PriorOperator,
    acc: ChainAccumulator,
    lam_trace: np.ndarray,
    accepted: int,
    steps: int,
    truncated: bool,
    ess: float,
) -> ChainSummary:
    return ChainSummary(
        mean_u=FieldVector(acc.mean, prior.grid),
        cov_u=acc.covariance(),
        var_u=acc.variance(),
        bands=acc.bands(),
        lambda_mean=acc.lam_mean,
        lambda_var=acc.lambda_variance(),
        acceptance_rate_v=accepted / max(steps, 1),
        ess_lambda=ess,
        n_kept=acc.count,
        truncated=truncated,
        lambda_trace=lam_trace,
    )


def run_chain(
    prior: PriorOperator,
    lam_prior: LambdaPrior,
    F: ForwardOperator,
    data: DataVector,
    cfg: GibbsConfig,
    trace_path: Path | None = None,
    header: str = "",
) -> ChainSummary:
    """Single chain; `header` is written verbatim ahead of the streamed `iter,lambda` rows."""
    prior.grid.require(F.param_grid, "forward parameter grid")
    seed = np.random.SeedSequence(cfg.rng_seed)
    acc, lam_trace, accepted, steps, truncated = _run_single(prior, lam_prior, F, data, cfg, seed, trace_path, header)
    summary = _summarize(prior, acc, lam_trace, accepted, steps, truncated, effective_sample_size(lam_trace))
    logger.info(
        "Chain finished: %d kept, v acceptance %.3f, lambda mean %.4f var %.4f",
        summary.n_kept, summary.acceptance_rate_v, summary.lambda_mean, summary.lambda_var,
    )
    return summary


def run_chains(
    prior: PriorOperator,
    lam_prior: LambdaPrior,
    F: ForwardOperator,
    data: DataVector,
    cfg: GibbsConfig,
    trace_dir: Path | None = None,
    workers: int = 1,
    header: str = "",
) -> ChainSummary:
    """Independent chains from spawned seed streams, merged in chain order."""
    if cfg.n_chains == 1:
        trace_path = trace_dir / "gibbs_lambda_trace.csv" if trace_dir else None
        return run_chain(prior, lam_prior, F, data, cfg, trace_path, header)
    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(cfg.n_chains)
    paths = [trace_dir / f"gibbs_lambda_trace_{i}.csv" if trace_dir else None for i in range(cfg.n_chains)]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(
            pool.map(lambda args: _run_single(prior, lam_prior, F, data, cfg, *args, header), zip(seeds, paths))
        )
    merged = results[0][0]
    for acc, *_ in results[1:]:
        merged = merged.merge(acc)
    lam_trace = np.concatenate([r[1] for r in results])
    accepted = sum(r[2] for r in results)
    steps = sum(r[3] for r in results)
    truncated = any(r[4] for r in results)
    ess = sum(effective_sample_size(r[1]) for r in results)
    return _summarize(prior, merged, lam_trace, accepted, steps, truncated, ess)
