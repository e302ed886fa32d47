from __future__ import annotations

import itertools
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
from scipy import stats

from ncpvi.discretize import Boundary, build_grid
from ncpvi.forward import DataVector, ShapeMismatchError, build_forward
from ncpvi.gibbs import (
    ChainAccumulator,
    ChainState,
    GibbsConfig,
    effective_sample_size,
    fold_sign,
    lambda_conditional,
    lambda_gibbs_step,
    lambda_log_acceptance,
    pcn_v_step,
    run_chain,
    run_chains,
)
from ncpvi.lowrank import dense_posterior_covariance
from ncpvi.prior import LambdaPrior, build_prior

# λ pinned at 1 by a hyper-prior with negligible spread.
PINNED = LambdaPrior(mean=1.0, variance=1e-12)


def _problem(n: int = 30, tau: float = 1.0, seed: int = 0, zero_data: bool = False):
    grid = build_grid(n, Boundary.NEUMANN)
    prior = build_prior(grid)
    F = build_forward(grid)
    rng = np.random.default_rng(seed)
    if zero_data:
        d = np.zeros(F.n_obs)
    else:
        d = F.observe_array(prior.sample(rng)) + 0.1 * rng.standard_normal(F.n_obs)
    data = DataVector(d=d, tau=tau, noise_pct=0.0, x_obs=F.obs_points, fine_n=10 * n)
    return grid, prior, F, data


class GibbsConfigTests(unittest.TestCase):
    def test_validation(self) -> None:
        with self.assertRaises(ValueError):
            GibbsConfig(beta=0.0)
        with self.assertRaises(ValueError):
            GibbsConfig(beta=1.5)
        with self.assertRaises(ValueError):
            GibbsConfig(n_samples=10, burn_in=10)
        with self.assertRaises(ValueError):
            GibbsConfig(thin=0)


class PcnStepTests(unittest.TestCase):
    def test_flat_likelihood_draws_from_prior(self) -> None:
        # With Φ ≈ 0 and β = 1 every proposal is a fresh prior draw and is accepted.
        grid, prior, F, data = _problem(tau=1e-12, zero_data=True)
        rng = np.random.default_rng(4)
        state = ChainState.start(prior, F, 1.0, rng)
        draws = []
        accepted = 0
        for _ in range(10_000):
            state, ok = pcn_v_step(state, prior, F, data, 1.0, rng)
            accepted += ok
            draws.append(state.v)
        draws = np.array(draws)
        self.assertEqual(accepted, 10_000)

        expected = np.diag(prior.dense_covariance())
        np.testing.assert_allclose(draws.var(axis=0, ddof=1), expected, rtol=0.1)
        for node in (0, grid.n // 2, grid.n - 1):
            result = stats.kstest(draws[:, node], "norm", args=(0.0, np.sqrt(expected[node])))
            self.assertGreater(result.pvalue, 0.01)

    def test_rejection_keeps_current_state(self) -> None:
        grid, prior, F, data = _problem(tau=1e8)
        rng = np.random.default_rng(1)
        state = ChainState.start(prior, F, 1.0, rng)
        rejected = 0
        for _ in range(50):
            new, ok = pcn_v_step(state, prior, F, data, 1.0, rng)
            if not ok:
                rejected += 1
                self.assertIs(new, state)
            state = new
        self.assertGreater(rejected, 0)


class LambdaStepTests(unittest.TestCase):
    def setUp(self) -> None:
        rng = np.random.default_rng(6)
        self.hv = rng.standard_normal(20)
        self.data = DataVector(
            d=rng.standard_normal(20), tau=1.3, noise_pct=0.0, x_obs=np.linspace(0.05, 1.0, 20), fine_n=100
        )
        self.lam_prior = LambdaPrior(mean=1.0, variance=4.0)

    def test_exact_conditional_is_always_accepted(self) -> None:
        for lam, proposal in [(0.3, 1.7), (-2.0, 0.5), (1.0, 1.0), (5.0, -3.0)]:
            log_ratio = lambda_log_acceptance(lam, proposal, self.hv, self.data, self.lam_prior)
            self.assertLess(abs(log_ratio), 1e-9)

    def test_conditional_without_signal_is_prior(self) -> None:
        mean, var = lambda_conditional(np.zeros(20), self.data, self.lam_prior)
        self.assertEqual((mean, var), (1.0, 4.0))

    def test_cached_observation_must_match_forward_map(self) -> None:
        grid, prior, F, data = _problem(n=20)
        rng = np.random.default_rng(2)
        state = ChainState.start(prior, F, 1.0, rng)
        lam = lambda_gibbs_step(state, F, data, LambdaPrior(), rng)
        self.assertTrue(np.isfinite(lam))
        stale = ChainState(v=state.v, lam=state.lam, hv=state.hv[:-1])
        with self.assertRaises(ShapeMismatchError):
            lambda_gibbs_step(stale, F, data, LambdaPrior(), rng)

    def test_conditional_formula(self) -> None:
        mean, var = lambda_conditional(self.hv, self.data, self.lam_prior)
        precision = self.data.tau * self.hv @ self.hv + 1.0 / 4.0
        self.assertAlmostEqual(var, 1.0 / precision, places=14)
        self.assertAlmostEqual(mean, (self.data.tau * self.hv @ self.data.d + 0.25) / precision, places=12)


class AccumulatorTests(unittest.TestCase):
    def setUp(self) -> None:
        rng = np.random.default_rng(3)
        self.u = rng.standard_normal((120, 12)) @ rng.standard_normal((12, 12))
        self.lam = rng.normal(2.0, 0.5, 120)

    def _fill(self, rows: range) -> ChainAccumulator:
        acc = ChainAccumulator(12, (2, 5))
        for i in rows:
            acc.push(self.u[i], self.lam[i])
        return acc

    def test_matches_batch_statistics(self) -> None:
        acc = self._fill(range(120))
        np.testing.assert_allclose(acc.mean, self.u.mean(axis=0), rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(acc.variance(), self.u.var(axis=0, ddof=1), rtol=1e-10)
        cov = np.cov(self.u, rowvar=False)
        np.testing.assert_allclose(acc.covariance(), cov, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(acc.bands()[5], np.diag(cov, 5), rtol=1e-10, atol=1e-12)
        self.assertAlmostEqual(acc.lambda_variance(), float(self.lam.var(ddof=1)), places=12)

    def test_merge_equals_single_pass(self) -> None:
        single = self._fill(range(120))
        merged = self._fill(range(50)).merge(self._fill(range(50, 120)))
        self.assertEqual(merged.count, 120)
        np.testing.assert_allclose(merged.mean, single.mean, atol=1e-12)
        np.testing.assert_allclose(merged.covariance(), single.covariance(), atol=1e-12 * np.abs(single.covariance()).max())
        for k in (0, 2, 5):
            np.testing.assert_allclose(merged.bands()[k], single.bands()[k], atol=1e-10)
        self.assertAlmostEqual(merged.lam_mean, single.lam_mean, places=12)
        self.assertAlmostEqual(merged.lambda_variance(), single.lambda_variance(), places=12)

    def test_merge_with_empty(self) -> None:
        filled = self._fill(range(30))
        merged = ChainAccumulator(12, (2, 5)).merge(filled)
        np.testing.assert_allclose(merged.mean, filled.mean, atol=1e-15)
        np.testing.assert_allclose(merged.variance(), filled.variance(), atol=1e-15)

    def test_offsets_beyond_grid_are_dropped(self) -> None:
        acc = ChainAccumulator(12, (5, 12, 40))
        self.assertEqual(acc.offsets, (5,))


class EffectiveSampleSizeTests(unittest.TestCase):
    def test_independent_draws(self) -> None:
        x = np.random.default_rng(0).standard_normal(5000)
        ess = effective_sample_size(x)
        self.assertGreater(ess, 0.5 * x.size)
        self.assertLessEqual(ess, x.size)

    def test_correlated_draws(self) -> None:
        rng = np.random.default_rng(1)
        x = np.zeros(5000)
        for t in range(1, x.size):
            x[t] = 0.9 * x[t - 1] + rng.standard_normal()
        self.assertLess(effective_sample_size(x), 0.2 * x.size)

    def test_degenerate_inputs(self) -> None:
        self.assertEqual(effective_sample_size(np.ones(100)), 100.0)
        self.assertEqual(effective_sample_size(np.array([1.0, 2.0])), 2.0)


class RunChainTests(unittest.TestCase):
    def test_fixed_scale_chain_matches_gaussian_posterior(self) -> None:
        grid, prior, F, data = _problem(n=20, tau=0.05, seed=2)
        cfg = GibbsConfig(beta=0.8, n_samples=22_000, burn_in=2_000, thin=1, rng_seed=5, band_offsets=(2,))
        summary = run_chain(prior, PINNED, F, data, cfg)

        cov_op = dense_posterior_covariance(prior, F, data.tau, 1.0)
        H = F.dense_matrix()
        post_mean = cov_op @ (data.tau * H.T @ data.d / grid.h)
        post_var = np.diag(cov_op) / grid.h

        self.assertEqual(summary.n_kept, 20_000)
        self.assertGreater(summary.acceptance_rate_v, 0.0)
        self.assertLessEqual(summary.acceptance_rate_v, 1.0)
        scale = np.sqrt(post_var.max())
        self.assertLess(np.max(np.abs(summary.mean_u.values - post_mean)) / scale, 0.2)
        np.testing.assert_allclose(summary.var_u, post_var, rtol=0.2)
        self.assertAlmostEqual(summary.lambda_mean, 1.0, places=4)
        self.assertEqual(set(summary.bands), {0, 2})
        self.assertEqual(summary.cov_u.shape, (20, 20))

    def test_fixed_seed_is_reproducible(self) -> None:
        grid, prior, F, data = _problem(n=20)
        cfg = GibbsConfig(n_samples=300, burn_in=100, thin=2, rng_seed=9)
        a = run_chain(prior, LambdaPrior(), F, data, cfg)
        b = run_chain(prior, LambdaPrior(), F, data, cfg)
        np.testing.assert_array_equal(a.lambda_trace, b.lambda_trace)
        np.testing.assert_array_equal(a.mean_u.values, b.mean_u.values)

    def test_time_budget_truncates_chain(self) -> None:
        grid, prior, F, data = _problem(n=20)
        cfg = GibbsConfig(n_samples=5000, burn_in=0, thin=1, max_seconds=5.0)
        with patch("ncpvi.gibbs.time.monotonic", side_effect=itertools.count(0.0, 10.0)):
            summary = run_chain(prior, LambdaPrior(), F, data, cfg)
        self.assertTrue(summary.truncated)
        self.assertEqual(summary.n_kept, 1)

    def test_parallel_chains_merge_and_stream_traces(self) -> None:
        grid, prior, F, data = _problem(n=20)
        cfg = GibbsConfig(n_samples=200, burn_in=50, thin=5, n_chains=2, rng_seed=3)
        with tempfile.TemporaryDirectory() as tmp:
            summary = run_chains(prior, LambdaPrior(), F, data, cfg, Path(tmp), workers=2, header="# run=test\n")
            self.assertEqual(summary.n_kept, 60)
            self.assertEqual(summary.lambda_trace.size, 60)
            for i in range(2):
                lines = (Path(tmp) / f"gibbs_lambda_trace_{i}.csv").read_text(encoding="utf-8").splitlines()
                self.assertEqual(lines[0], "# run=test")
                self.assertEqual(lines[1], "iter,lambda")
                self.assertEqual(len(lines), 2 + 40)
                self.assertTrue(lines[2].startswith("0,"))

    def test_thinning_leaves_moments_unchanged(self) -> None:
        grid, prior, F, data = _problem(n=20, tau=0.05, seed=2)
        base = dict(beta=0.8, n_samples=22_000, burn_in=2_000, rng_seed=5, band_offsets=(2,))
        dense = run_chain(prior, PINNED, F, data, GibbsConfig(thin=1, **base))
        thinned = run_chain(prior, PINNED, F, data, GibbsConfig(thin=10, **base))
        self.assertEqual((dense.n_kept, thinned.n_kept), (20_000, 2_000))
        scale = np.sqrt(dense.var_u.max())
        self.assertLess(np.max(np.abs(thinned.mean_u.values - dense.mean_u.values)) / scale, 0.2)
        np.testing.assert_allclose(thinned.var_u, dense.var_u, rtol=0.25)

    def test_default_step_mixes_on_informative_data(self) -> None:
        grid, prior, F, data = _problem(n=30, tau=100.0, seed=5)
        cfg = GibbsConfig(n_samples=3000, burn_in=500, rng_seed=4)
        self.assertEqual(cfg.beta, 0.02)
        summary = run_chain(prior, LambdaPrior(), F, data, cfg)
        self.assertGreater(summary.acceptance_rate_v, 0.0)
        self.assertLess(summary.acceptance_rate_v, 1.0)

    def test_single_chain_trace_file(self) -> None:
        grid, prior, F, data = _problem(n=20)
        cfg = GibbsConfig(n_samples=100, burn_in=10, thin=10)
        with tempfile.TemporaryDirectory() as tmp:
            run_chains(prior, LambdaPrior(), F, data, cfg, Path(tmp))
            rows = (Path(tmp) / "gibbs_lambda_trace.csv").read_text(encoding="utf-8").splitlines()
        self.assertEqual(rows[0], "iter,lambda")
        self.assertEqual([r.split(",")[0] for r in rows[1:]], [str(i) for i in range(0, 100, 10)])


class FlatLikelihoodChainTests(unittest.TestCase):
    """Zero data and τ ≈ 0: with β = 1 the chain draws (v, λ) independently from the prior."""

    def setUp(self) -> None:
        self.grid, self.prior, self.F, self.data = _problem(tau=1e-12, zero_data=True)
        self.lam_prior = LambdaPrior(mean=1.0, variance=4.0)
        self.c0_diag = np.diag(self.prior.dense_covariance())

    def test_joint_draws_follow_the_prior(self) -> None:
        rng = np.random.default_rng(12)
        state = ChainState.start(self.prior, self.F, self.lam_prior.mean, rng)
        nodes = (3, self.grid.n - 5)
        lams, vs = [], []
        for _ in range(4000):
            state, _ = pcn_v_step(state, self.prior, self.F, self.data, 1.0, rng)
            lam = lambda_gibbs_step(state, self.F, self.data, self.lam_prior, rng)
            state = ChainState(v=state.v, lam=lam, hv=state.hv)
            lams.append(lam)
            vs.append(state.v[list(nodes)])
        lams, vs = np.array(lams), np.array(vs)

        self.assertGreater(stats.kstest(lams, "norm", args=(1.0, 2.0)).pvalue, 0.01)
        for col, node in enumerate(nodes):
            sd = np.sqrt(self.c0_diag[node])
            self.assertGreater(stats.kstest(vs[:, col], "norm", args=(0.0, sd)).pvalue, 0.01)
            self.assertLess(abs(np.corrcoef(lams, vs[:, col])[0, 1]), 4.0 / np.sqrt(lams.size))

    def test_summary_recovers_prior_moments(self) -> None:
        cfg = GibbsConfig(beta=1.0, n_samples=5000, burn_in=0, thin=1, rng_seed=11)
        summary = run_chain(self.prior, self.lam_prior, self.F, self.data, cfg)
        self.assertGreaterEqual(summary.acceptance_rate_v, 0.999)
        se = np.sqrt(self.lam_prior.variance / summary.n_kept)
        self.assertLess(abs(summary.lambda_mean - self.lam_prior.mean), 3.0 * se)
        # Var(λ v_i) = E[λ²] c0_ii for independent λ and v.
        second_moment = self.lam_prior.mean**2 + self.lam_prior.variance
        np.testing.assert_allclose(summary.var_u, second_moment * self.c0_diag, rtol=0.2)


class SignFoldTests(unittest.TestCase):
    def test_fold_keeps_field_and_orients_data_fit(self) -> None:
        grid, prior, F, data = _problem(n=20)
        rng = np.random.default_rng(8)
        flipped = 0
        for _ in range(20):
            state = ChainState.start(prior, F, 1.5, rng)
            folded = fold_sign(state, data)
            flipped += folded is not state
            np.testing.assert_array_equal(folded.lam * folded.v, state.lam * state.v)
            np.testing.assert_allclose(folded.hv, F.observe_array(folded.v), atol=1e-12)
            self.assertGreaterEqual(float(np.dot(data.d, folded.hv)), 0.0)
        self.assertGreater(flipped, 0)

    def test_reported_scale_is_positive(self) -> None:
        grid, prior, F, data = _problem(n=20, tau=100.0, seed=4)
        cfg = GibbsConfig(n_samples=4000, burn_in=1000, thin=1, rng_seed=2)
        summary = run_chain(prior, LambdaPrior(), F, data, cfg)
        self.assertGreater(summary.lambda_mean, 0.0)


if __name__ == "__main__":
    unittest.main()
