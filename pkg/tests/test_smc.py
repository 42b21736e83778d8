import jax
import jax.numpy as jnp
import numpy as np
import pytest
from jax.scipy.special import logsumexp

from conftest import random_lgssm
from hamsmc.dist import DegeneracyError
from hamsmc.smc import (
    FilterResult,
    _smc,
    check_degeneracy,
    elbo_smc,
    ess,
    log_ess,
    one_step_predict,
    run_keys,
    smc_filter,
)
from hamsmc.ssm import TrajectoryBatch, kalman_filter, kalman_loglik, lgssm_spec_from_params, simulate


class TestEss:
    def test_examples(self):
        assert ess([1.0, 1.0, 1.0, 1.0]) == pytest.approx(4.0, abs=1e-15)
        assert ess([1.0, 0.0, 0.0, 0.0]) == pytest.approx(1.0, abs=1e-15)

    def test_invalid(self):
        with pytest.raises(DegeneracyError):
            ess([0.0, 0.0])
        with pytest.raises(ValueError):
            ess([1.0, -1.0])

    def test_log_space_agrees(self):
        w = np.random.default_rng(0).uniform(size=20)
        assert float(jnp.exp(log_ess(jnp.log(w)))) == pytest.approx(ess(w), rel=1e-12)
        assert 1.0 <= ess(w) <= 20.0


class TestFilter:
    def test_single_observation_single_particle(self, lgssm):
        model, params, ys = lgssm
        res = smc_filter(model, params, ys[:1], rng=4, num_particles=1)
        x1 = res.particles[0, 0]
        expected = model.bind(params).emission_logpdf(ys[0], x1)
        assert float(res.log_z) == float(expected)

    def test_first_step_is_log_mean_emission(self, lgssm):
        model, params, ys = lgssm
        res = smc_filter(model, params, ys, rng=1, num_particles=7)
        bound = model.bind(params)
        lw = jax.vmap(lambda x: bound.emission_logpdf(ys[0], x))(res.particles[0])
        assert float(res.log_mean_weights[0]) == pytest.approx(float(logsumexp(lw) - np.log(7)), abs=1e-12)
        assert float(res.log_z) == pytest.approx(float(jnp.sum(res.log_mean_weights)), abs=1e-12)

    def test_deterministic_given_seed(self, lgssm):
        model, params, ys = lgssm
        a = smc_filter(model, params, ys, rng=3, num_particles=8)
        b = smc_filter(model, params, ys, rng=3, num_particles=8)
        assert float(a.log_z) == float(b.log_z)
        c = smc_filter(model, params, ys, rng=4, num_particles=8)
        assert float(a.log_z) != float(c.log_z)

    def test_shapes(self, lgssm):
        model, params, ys = lgssm
        res = smc_filter(model, params, ys, num_particles=6)
        T = ys.shape[0]
        assert res.particles.shape == (T, 6, 2)
        assert res.log_weights.shape == (T, 6) and res.ancestors.shape == (T, 6)
        np.testing.assert_array_equal(res.ancestors[0], np.arange(6))
        assert np.all(np.asarray(res.ess) >= 1.0 - 1e-9) and np.all(np.asarray(res.ess) <= 6.0 + 1e-9)
        assert set(res.to_json()) == {"logZ", "per_step_log_mean_w", "ess"}

    def test_identity_proposal_equals_bootstrap(self, lgssm):
        model, params, ys = lgssm

        def proposal(q_params, x_prev, u, y, y_prev):
            return model.transition.dist(model.transition.prepare(q_params), x_prev, u, y_prev)

        a = smc_filter(model, params, ys, rng=2, num_particles=9)
        b = smc_filter(model, params, ys, rng=2, num_particles=9, proposal=proposal, q_params=params["transition"])
        assert float(b.log_z) == pytest.approx(float(a.log_z), abs=1e-10)

    def test_invalid_particle_count(self, lgssm):
        model, params, ys = lgssm
        with pytest.raises(ValueError):
            smc_filter(model, params, ys, num_particles=0)

    def test_degeneracy_reports_step(self):
        T, K = 4, 3
        lmw = jnp.array([0.0, -1.0, -jnp.inf, -2.0])
        res = FilterResult(jnp.sum(lmw), lmw, jnp.ones(T), jnp.zeros((T, K)), jnp.zeros((T, K), int),
                           jnp.zeros((T, K, 1)), jnp.zeros(()), jnp.zeros(()))
        with pytest.raises(DegeneracyError) as info:
            check_degeneracy(res)
        assert info.value.t == 3

    @pytest.mark.parametrize("scheme", ["multinomial", "systematic"])
    def test_unbiased_likelihood(self, scheme):
        model, params = random_lgssm(jax.random.PRNGKey(21))
        _, ys = simulate(model, params, 0, 10)
        exact = float(kalman_loglik(lgssm_spec_from_params(model, params), ys))
        us = jnp.zeros((10, 0))
        log_z = jax.vmap(lambda k: _smc(model, params, ys, us, k, 20, scheme).log_z)(run_keys(5, 1000))
        ratio = np.exp(np.asarray(log_z) - exact)
        se = ratio.std(ddof=1) / np.sqrt(ratio.size)
        assert abs(ratio.mean() - 1.0) < 3 * se


class TestElbo:
    def test_below_exact_likelihood(self, lgssm):
        model, params, ys = lgssm
        batch = TrajectoryBatch([np.asarray(ys)], [np.zeros((ys.shape[0], 0))], ["s"])
        est = elbo_smc(model, params, batch, num_particles=10, rng=0, num_runs=30)
        exact = float(kalman_loglik(lgssm_spec_from_params(model, params), ys))
        assert est.value <= exact + 3 * est.se
        assert est.per_step == pytest.approx(est.value / ys.shape[0])
        assert est.per_run.shape == (30,)

    def test_more_particles_tighter(self, lgssm):
        model, params, ys = lgssm
        batch = TrajectoryBatch([np.asarray(ys)], [np.zeros((ys.shape[0], 0))], ["s"])
        small = elbo_smc(model, params, batch, 2, rng=0, num_runs=40)
        large = elbo_smc(model, params, batch, 50, rng=0, num_runs=40)
        assert large.value > small.value

    def test_batch_mean_over_mixed_lengths(self, lgssm):
        model, params, ys = lgssm
        y = np.asarray(ys)
        batch = TrajectoryBatch([y, y[:10]], [np.zeros((25, 0)), np.zeros((10, 0))], ["a", "b"])
        est = elbo_smc(model, params, batch, 5, rng=1, num_runs=2)
        assert est.per_step == pytest.approx(est.value / 17.5)

    def test_requires_runs(self, lgssm):
        model, params, ys = lgssm
        batch = TrajectoryBatch([np.asarray(ys)], [np.zeros((25, 0))], ["s"])
        with pytest.raises(ValueError):
            elbo_smc(model, params, batch, 5, num_runs=0)


class TestPredict:
    def test_matches_kalman_predictive_mean(self, lgssm):
        model, params, ys = lgssm
        ys = ys[:10]
        pred = np.asarray(one_step_predict(model, params, ys, rng=0, num_particles=20_000))
        exact = np.asarray(kalman_filter(lgssm_spec_from_params(model, params), ys).pred_y_mean)[1:]
        assert pred.shape == exact.shape
        assert np.max(np.abs(pred - exact)) < 0.05
