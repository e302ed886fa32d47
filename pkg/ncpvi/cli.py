"""Command-line entry point for the elliptic 1D experiments."""

from __future__ import annotations

import argparse
import logging
import sqlite3
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ncpvi import csvio
from ncpvi.config import ConfigError, ExperimentConfig, describe, load_config
from ncpvi.diagnostics import (
    band_relative_errors,
    count_informed_eigenvalues,
    coverage_fraction,
    covariance_bands,
    credibility_band,
    kl_gaussian_1d,
    matrix_relative_error,
    mean_relative_error,
    mesh_independence_study,
    relative_error,
    step_norm_overlay_ratio,
    u_posterior_moments,
)
from ncpvi.discretize import Boundary, FieldVector, Grid1D, GridMismatchError, build_grid
from ncpvi.forward import DataVector, ForwardOperator, build_forward, generate_data, truth_elliptic1d
from ncpvi.gibbs import run_chains
from ncpvi.ledger import RunLedger
from ncpvi.lowrank import double_pass_eig, gtilde_operator
from ncpvi.ncp_vi import run_vi
from ncpvi.prior import PriorOperator, build_prior

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_NOT_CONVERGED = 3

TRUTH_DESCRIPTOR = "10*(cos(4*pi*x)+1)"
DENSE_COV_MAX_N = 200


@dataclass(frozen=True, eq=False)
class Problem:
    grid: Grid1D
    prior: PriorOperator
    F: ForwardOperator
    data: DataVector


@dataclass
class CommandResult:
    exit_code: int = EXIT_OK
    summary: dict | None = None


def _load_problem(cfg: ExperimentConfig) -> Problem:
    data = csvio.load_data(cfg.output_dir / "data.csv")
    grid = build_grid(cfg.n_coarse, Boundary.NEUMANN)
    prior = build_prior(grid, cfg.alpha_prior, cfg.prior_scale)
    F = build_forward(grid, cfg.alpha_pde, data.x_obs)
    return Problem(grid=grid, prior=prior, F=F, data=data)


def _write_dense(path: Path, cov: np.ndarray, *, config_hash: str) -> None:
    n = cov.shape[0]
    rows = ((i, j, cov[i, j]) for i in range(n) for j in range(n))
    csvio.write_csv(path, ["i", "j", "value"], rows, config_hash=config_hash)


def _read_dense(path: Path) -> np.ndarray:
    table = csvio.read_csv(path)
    entries = [(int(i), int(j), float(v)) for i, j, v in table.rows]
    n = max(i for i, _, _ in entries) + 1
    cov = np.zeros((n, n))
    for i, j, v in entries:
        cov[i, j] = v
    return cov


def cmd_generate_data(cfg: ExperimentConfig, ledger: RunLedger) -> CommandResult:
    grid = build_grid(cfg.n_coarse, Boundary.NEUMANN)
    F = build_forward(grid, cfg.alpha_pde)
    data = generate_data(truth_elliptic1d, cfg.n_fine, F, cfg.noise_pct, cfg.seeds.data)
    path = csvio.save_data(
        cfg.output_dir / "data.csv",
        data,
        config_hash=cfg.config_hash(),
        meta={"seed": cfg.seeds.data, "truth": TRUTH_DESCRIPTOR},
    )
    return CommandResult(summary={"path": str(path), "n_obs": int(data.d.size), "tau": data.tau})


def cmd_run_vi(cfg: ExperimentConfig, ledger: RunLedger) -> CommandResult:
    problem = _load_problem(cfg)
    grid, out, digest = problem.grid, cfg.output_dir, cfg.config_hash()
    truth = FieldVector.from_function(grid, truth_elliptic1d)

    result = run_vi(problem.prior, cfg.lambda_prior, problem.F, problem.data, cfg.vi, truth)
    lam_post = result.lam_post
    ledger.record(
        "vi_converged" if result.converged else "vi_not_converged",
        "run-vi",
        {"n_iter": result.n_iter, "lambda_mean": lam_post.lam_star, "lambda_var": lam_post.c_lambda},
    )

    csvio.write_csv(
        out / "vi_trace.csv",
        ["iter", "lambda", "c_lambda", "rel_err", "step_norm"],
        ((r.iteration, r.lam, r.c_lambda, r.rel_err, r.step_norm) for r in result.trace.records),
        config_hash=digest,
    )
    mean_u, cov_u = u_posterior_moments(result.v_post, lam_post)
    variance = cov_u.variance()
    lower, upper = credibility_band(mean_u, variance, cfg.credibility_level)
    csvio.write_field(out / "vi_mean.csv", grid.nodes, mean_u.values, config_hash=digest)
    csvio.write_field(out / "vi_variance.csv", grid.nodes, variance, config_hash=digest)
    csvio.write_csv(
        out / "vi_credibility.csv",
        ["i", "x_i", "lower", "upper"],
        zip(range(grid.n), grid.nodes, lower, upper),
        config_hash=digest,
        meta={"level": cfg.credibility_level},
    )
    offsets = [k for k in cfg.band_offsets if k < grid.n]
    csvio.write_bands(out / "vi_bands.csv", grid.nodes, covariance_bands(cov_u, offsets), config_hash=digest)
    if grid.n <= DENSE_COV_MAX_N:
        _write_dense(out / "vi_covariance.csv", cov_u.dense(), config_hash=digest)

    r_dump = min(cfg.n_eig_dump, grid.n)
    dump = double_pass_eig(
        gtilde_operator(problem.prior, problem.F, problem.data.tau),
        grid,
        r_dump,
        min(cfg.vi.oversample, grid.n - r_dump),
        cfg.vi.eig_seed,
    )
    csvio.write_csv(
        out / "eigenvalues.csv",
        ["k", "xi_k"],
        zip(range(1, dump.rank + 1), dump.xis),
        config_hash=digest,
        meta={"rho": lam_post.rho},
    )

    metrics = {
        "lambda_mean": lam_post.lam_star,
        "lambda_var": lam_post.c_lambda,
        "n_iter": result.n_iter,
        "converged": result.converged,
        "rel_err": relative_error(mean_u, truth),
        "informed_eigenvalues": count_informed_eigenvalues(dump, lam_post.rho),
        "rank_deficient": result.eig.rank_deficient,
        "coverage": coverage_fraction(truth, lower, upper),
    }
    csvio.write_metrics(out / "metrics.csv", metrics, config_hash=digest)
    return CommandResult(EXIT_OK if result.converged else EXIT_NOT_CONVERGED, metrics)


def cmd_run_gibbs(cfg: ExperimentConfig, ledger: RunLedger) -> CommandResult:
    problem = _load_problem(cfg)
    grid, out, digest = problem.grid, cfg.output_dir, cfg.config_hash()
    out.mkdir(parents=True, exist_ok=True)
    summary = run_chains(
        problem.prior,
        cfg.lambda_prior,
        problem.F,
        problem.data,
        cfg.gibbs,
        trace_dir=out,
        workers=cfg.gibbs.n_chains,
        header=csvio.comment_header(digest),
    )
    metrics = {
        "lambda_mean": summary.lambda_mean,
        "lambda_var": summary.lambda_var,
        "acceptance_rate_v": summary.acceptance_rate_v,
        "ess_lambda": summary.ess_lambda,
        "n_kept": summary.n_kept,
        "truncated": summary.truncated,
    }
    ledger.record("chain_finished", "run-gibbs", metrics)

    csvio.write_field(out / "gibbs_mean.csv", grid.nodes, summary.mean_u.values, config_hash=digest)
    csvio.write_field(out / "gibbs_variance.csv", grid.nodes, summary.var_u, config_hash=digest)
    offsets = [k for k in cfg.band_offsets if k in summary.bands]
    csvio.write_bands(
        out / "gibbs_bands.csv", grid.nodes, {k: summary.bands[k] for k in offsets}, config_hash=digest
    )
    if summary.cov_u is not None:
        _write_dense(out / "gibbs_covariance.csv", summary.cov_u, config_hash=digest)
    csvio.write_metrics(out / "gibbs_metrics.csv", metrics, config_hash=digest)
    return CommandResult(summary=metrics)


def cmd_compare(cfg: ExperimentConfig, ledger: RunLedger) -> CommandResult:
    out, digest = cfg.output_dir, cfg.config_hash()
    grid = build_grid(cfg.n_coarse, Boundary.NEUMANN)
    vi_metrics = csvio.read_metrics(out / "metrics.csv")
    gibbs_metrics = csvio.read_metrics(out / "gibbs_metrics.csv")

    def field(name: str) -> FieldVector:
        values = csvio.read_csv(out / name).column("value")
        if values.size != grid.n:
            raise GridMismatchError(f"{name} has {values.size} nodes, config expects n={grid.n}")
        return FieldVector(values, grid)

    vi_lam = (float(vi_metrics["lambda_mean"]), float(vi_metrics["lambda_var"]))
    gibbs_lam = (float(gibbs_metrics["lambda_mean"]), float(gibbs_metrics["lambda_var"]))
    metrics: dict[str, float] = {
        "kl_lambda": kl_gaussian_1d(vi_lam, gibbs_lam),
        "mean_rel_err": mean_relative_error(field("vi_mean.csv"), field("gibbs_mean.csv")),
    }
    band_errors = band_relative_errors(
        csvio.read_bands(out / "vi_bands.csv"), csvio.read_bands(out / "gibbs_bands.csv")
    )
    for k, err in band_errors.items():
        metrics["variance_rel_err" if k == 0 else f"band_{k}_rel_err"] = err
    vi_cov, gibbs_cov = out / "vi_covariance.csv", out / "gibbs_covariance.csv"
    if vi_cov.exists() and gibbs_cov.exists():
        metrics["matrix_rel_err"] = matrix_relative_error(_read_dense(vi_cov), _read_dense(gibbs_cov))

    csvio.write_metrics(out / "compare_metrics.csv", metrics, config_hash=digest)
    return CommandResult(summary=metrics)


def cmd_mesh_study(cfg: ExperimentConfig, ledger: RunLedger) -> CommandResult:
    out, digest = cfg.output_dir, cfg.config_hash()
    data = csvio.load_data(out / "data.csv")
    study = mesh_independence_study(
        cfg.mesh_sizes,
        data,
        cfg.vi,
        lam_prior=cfg.lambda_prior,
        alpha=cfg.alpha_prior,
        alpha_pde=cfg.alpha_pde,
        prior_scale=cfg.prior_scale,
        workers=cfg.mesh_workers,
    )
    csvio.write_csv(
        out / "mesh_lambda.csv",
        ["mesh", "lambda_mean", "lambda_var", "n_iter", "converged"],
        ((row.mesh, row.lambda_mean, row.lambda_var, row.n_iter, row.converged) for row in study.rows),
        config_hash=digest,
    )
    csvio.write_csv(
        out / "mesh_step_norms.csv",
        ["mesh", "iter", "step_norm"],
        (
            (mesh, rec.iteration, rec.step_norm)
            for mesh, trace in study.traces.items()
            for rec in trace.records
        ),
        config_hash=digest,
    )
    metrics = {
        "lambda_spread": study.lambda_spread(),
        "step_norm_overlay_ratio": step_norm_overlay_ratio(study.traces),
    }
    csvio.write_metrics(out / "mesh_metrics.csv", metrics, config_hash=digest)
    converged = all(row.converged for row in study.rows)
    return CommandResult(EXIT_OK if converged else EXIT_NOT_CONVERGED, metrics)


COMMANDS: dict[str, Callable[[ExperimentConfig, RunLedger], CommandResult]] = {
    "generate-data": cmd_generate_data,
    "run-vi": cmd_run_vi,
    "run-gibbs": cmd_run_gibbs,
    "compare": cmd_compare,
    "mesh-study": cmd_mesh_study,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(description="Non-centered mean-field VI experiments")
    parser.add_argument("command", choices=sorted(COMMANDS), help="Pipeline step to run")
    parser.add_argument("--config", default=None, help="Experiment YAML, e.g. config/experiments/elliptic1d.yaml")
    parser.add_argument("--output", default=None, help="Output directory override")
    parser.add_argument(
        "--seed-override",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="Override data, eig or chain seed; repeatable",
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(
            Path(args.config) if args.config else None,
            seed_overrides=args.seed_override,
            output_dir=args.output,
        )
    except ConfigError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE

    command = args.command
    ledger = RunLedger(cfg.output_dir / "runs.db")
    try:
        ledger.record("command_started", command, {"config_hash": cfg.config_hash(), "config": describe(cfg)})
    except (OSError, sqlite3.Error) as exc:
        logger.error("Cannot open the run ledger in %s: %s", cfg.output_dir, exc)
        return EXIT_USAGE
    started = time.monotonic()
    try:
        result = COMMANDS[command](cfg, ledger)
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        code = EXIT_NUMERICAL
        error = exc
    except (ValueError, OSError) as exc:
        # Covers config/grid inconsistencies and missing inputs.
        code = EXIT_USAGE
        error = exc
    else:
        ledger.record(
            "command_finished",
            command,
            {"exit_code": result.exit_code, "seconds": time.monotonic() - started, "summary": result.summary},
        )
        ledger.close()
        if result.exit_code == EXIT_NOT_CONVERGED:
            logger.warning("%s finished without convergence", command)
        return result.exit_code

    logger.error("%s failed: %s", command, error)
    ledger.record("command_failed", command, {"exit_code": code, "error": f"{type(error).__name__}: {error}"})
    ledger.close()
    return code


if __name__ == "__main__":
    raise SystemExit(main())
