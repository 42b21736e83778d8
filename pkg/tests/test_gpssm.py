import jax
import jax.numpy as jnp
import numpy as np
import pytest

from hamsmc.dist import full_gaussian, kl_gauss
from hamsmc.gpssm import (
    RbfHyper,
    SparseGPTransition,
    elbo_gpssm,
    gp_kl,
    gpssm_hsmc_weight,
    gpssm_model,
    gram,
    rbf_kernel,
    var_moments,
)
from hamsmc.hsmc import HsmcConfig, HsmcStepRecord, elbo_hsmc, hsmc_filter
from hamsmc.numcore import NotPositiveDefiniteError
from hamsmc.ssm import TrajectoryBatch, linear_gaussian_model, raw_from_tril, simulate


def gp_params(gp, zeta, mu, sigma, signal_var=1.0, lengthscale=1.0, noise=0.01):
    """Unwhitened parameters from explicit inducing moments for a single latent dimension."""
    P = zeta.shape[0]
    return {
        "zeta": jnp.asarray(zeta, dtype=jnp.float64).reshape(1, P, -1),
        "mu": jnp.asarray(mu, dtype=jnp.float64).reshape(1, P),
        "chol_raw": raw_from_tril(jnp.linalg.cholesky(jnp.asarray(sigma, dtype=jnp.float64)))[None],
        "log_signal_var": jnp.log(jnp.array([signal_var])),
        "log_lengthscales": jnp.log(jnp.full((1, zeta.shape[1]), lengthscale)),
        "log_noise": jnp.log(jnp.array([noise])),
    }


class TestKernel:
    def test_same_point_is_signal_variance(self):
        hyp = RbfHyper(jnp.array(2.5), jnp.array([0.3, 4.0]))
        assert float(rbf_kernel(jnp.array([1.0, -2.0]), jnp.array([1.0, -2.0]), hyp)) == 2.5

    def test_known_value(self):
        hyp = RbfHyper(jnp.array(1.0), jnp.array([2.0]))
        assert float(rbf_kernel(jnp.array([0.0]), jnp.array([2.0]), hyp)) == pytest.approx(np.exp(-0.5), abs=1e-15)

    def test_cross_covariance_shape(self):
        hyp = RbfHyper(jnp.array(1.0), jnp.ones(3))
        assert rbf_kernel(jnp.zeros((4, 3)), jnp.ones((2, 3)), hyp).shape == (4, 2)
        assert rbf_kernel(jnp.zeros((4, 3)), jnp.ones(3), hyp).shape == (4, 1)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            rbf_kernel(jnp.zeros(2), jnp.zeros(3), RbfHyper(jnp.array(1.0), jnp.ones(2)))

    def test_gram_positive_definite(self):
        pts = jax.random.normal(jax.random.PRNGKey(0), (30, 2))
        K = gram(pts, RbfHyper(jnp.array(1.0), jnp.ones(2)), jitter=1e-8)
        assert float(jnp.min(jnp.linalg.eigvalsh(K))) > 0.0


class TestMoments:
    def test_zero_mean_inducing_gives_zero_mean(self):
        gp = SparseGPTransition(1)
        zeta = jnp.linspace(-2, 2, 5)[:, None]
        p = gp_params(gp, zeta, jnp.zeros(5), 0.1 * jnp.eye(5))
        assert float(var_moments(gp, p, jnp.array([0.37])).mean[0]) == 0.0

    def test_single_inducing_point_at_query(self):
        gp = SparseGPTransition(1, num_inducing=1, jitter=0.0)
        p = gp_params(gp, jnp.array([[0.5]]), jnp.array([1.3]), jnp.array([[0.2]]), signal_var=2.0, noise=0.05)
        m = var_moments(gp, p, jnp.array([0.5]))
        assert abs(float(m.mean[0]) - 1.3) < 1e-10
        assert abs(float(m.var[0]) - 0.25) < 1e-10

    def test_prior_matching_inducing_gives_prior_variance(self):
        gp = SparseGPTransition(1)
        zeta = jnp.linspace(-2, 2, 6)[:, None]
        hyp = RbfHyper(jnp.array(1.5), jnp.array([0.8]))
        K = gram(zeta, hyp, gp.jitter)
        p = gp_params(gp, zeta, jnp.zeros(6), K, signal_var=1.5, lengthscale=0.8, noise=0.1)
        for q in (-3.0, 0.1, 1.7):
            assert abs(float(var_moments(gp, p, jnp.array([q])).var[0]) - 1.6) < 1e-10

    def test_far_from_inducing_reverts_to_prior(self):
        gp = SparseGPTransition(1)
        zeta = jnp.linspace(-1, 1, 4)[:, None]
        p = gp_params(gp, zeta, jnp.ones(4), 0.01 * jnp.eye(4), noise=0.02)
        m = var_moments(gp, p, jnp.array([40.0]))
        assert abs(float(m.mean[0])) < 1e-12
        assert float(m.var[0]) == pytest.approx(1.02, abs=1e-12)

    def test_equals_exact_gp_predictive(self):
        x = jnp.linspace(-3, 3, 20)[:, None]
        y = jnp.sin(2.0 * x[:, 0])
        hyp = RbfHyper(jnp.array(1.0), jnp.array([0.7]))
        noise = 1e-3
        K = gram(x, hyp, 0.0)
        A = K + noise * jnp.eye(20)
        post_mean = K @ jnp.linalg.solve(A, y)
        post_cov = K - K @ jnp.linalg.solve(A, K)
        gp = SparseGPTransition(1, num_inducing=20, jitter=1e-10)
        p = gp_params(gp, x, post_mean, post_cov + 1e-10 * jnp.eye(20), lengthscale=0.7, noise=noise)
        for q in (-2.2, 0.05, 1.3):
            xq = jnp.array([[q]])
            kq = rbf_kernel(xq, x, hyp)[0]
            exact_mean = kq @ jnp.linalg.solve(A, y)
            exact_var = 1.0 - kq @ jnp.linalg.solve(A, kq) + noise
            m = var_moments(gp, p, jnp.array([q]))
            assert abs(float(m.mean[0]) - float(exact_mean)) < 1e-6
            assert abs(float(m.var[0]) - float(exact_var)) < 1e-6

    def test_whitened_parameterization_matches(self):
        plain = SparseGPTransition(2, num_inducing=5)
        white = SparseGPTransition(2, num_inducing=5, whiten=True)
        params = plain.init(jax.random.PRNGKey(3), q_var=0.3)
        params["mu"] = jax.random.normal(jax.random.PRNGKey(4), (2, 5))
        prep = plain.prepare(params)
        wparams = dict(params, mu=prep["white_mean"], chol_raw=jax.vmap(raw_from_tril)(prep["white_cov"]))
        for q in jax.random.normal(jax.random.PRNGKey(5), (5, 2)):
            a, b = var_moments(plain, params, q), var_moments(white, wparams, q)
            np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
            np.testing.assert_allclose(a.var, b.var, atol=1e-10)
        assert float(gp_kl(plain, params)) == pytest.approx(float(gp_kl(white, wparams)), abs=1e-8)

    def test_wrong_input_shape(self):
        gp = SparseGPTransition(1, u_dim=1)
        with pytest.raises(ValueError):
            var_moments(gp, gp.init(jax.random.PRNGKey(0)), jnp.zeros(1))

    def test_duplicate_inducing_points_rejected(self):
        gp = SparseGPTransition(1, num_inducing=2, jitter=0.0)
        p = gp_params(gp, jnp.array([[0.3], [0.3]]), jnp.zeros(2), jnp.eye(2))
        with pytest.raises(NotPositiveDefiniteError):
            var_moments(gp, p, jnp.array([0.0]))
        with pytest.raises(NotPositiveDefiniteError):
            gp_kl(gp, p)


class TestKl:
    def test_prior_matching_is_zero(self):
        gp = SparseGPTransition(1)
        zeta = jnp.linspace(-2, 2, 6)[:, None]
        K = gram(zeta, RbfHyper(jnp.array(1.0), jnp.array([1.0])), gp.jitter)
        assert abs(float(gp_kl(gp, gp_params(gp, zeta, jnp.zeros(6), K)))) < 1e-8

    def test_matches_dense_gaussian_kl(self):
        gp = SparseGPTransition(3, num_inducing=6)
        params = gp.init(jax.random.PRNGKey(0), q_var=0.05)
        params["mu"] = jax.random.normal(jax.random.PRNGKey(1), (3, 6))
        hyp = gp.hyper(params)
        total = 0.0
        for d in range(3):
            K = gram(params["zeta"][d], RbfHyper(hyp.signal_var[d], hyp.lengthscales[d]), gp.jitter)
            L = gp.prepare(params)["chol_k"][d]
            S = jnp.diag(jnp.exp(jnp.diagonal(params["chol_raw"][d]))) ** 2
            total += float(kl_gauss(full_gaussian(params["mu"][d], S), full_gaussian(jnp.zeros(6), L @ L.T)))
            assert jnp.allclose(L @ L.T, K)
        assert float(gp_kl(gp, params)) == pytest.approx(total, rel=1e-8)

    def test_nonnegative(self):
        gp = SparseGPTransition(2, num_inducing=4, whiten=True)
        for seed in range(50):
            params = gp.init(jax.random.PRNGKey(seed), q_var=float(np.exp(np.random.default_rng(seed).normal())))
            params["mu"] = jax.random.normal(jax.random.PRNGKey(100 + seed), (2, 4))
            assert float(gp_kl(gp, params)) >= 0.0


class TestModel:
    def setup_method(self):
        self.model = gpssm_model(1, 2, num_inducing=4, decoder_hidden=3)
        self.params = self.model.init(jax.random.PRNGKey(0))
        _, self.ys = simulate(self.model, self.params, 2, 15)

    def test_filter_runs_and_is_finite(self):
        res = hsmc_filter(self.model, self.params, None, None, self.ys, rng=0,
                          cfg=HsmcConfig(num_particles=5, n_steps=3))
        assert np.isfinite(float(res.log_z))

    def test_elbo_subtracts_kl_once_per_sequence(self):
        batch = TrajectoryBatch([np.asarray(self.ys)] * 2, [np.zeros((15, 0))] * 2, ["a", "b"])
        cfg = HsmcConfig(num_particles=4, n_steps=2)
        gp_est = elbo_gpssm(self.model, self.params, None, None, batch, cfg, rng=0, num_runs=2)
        base = elbo_hsmc(self.model, self.params, None, None, batch, cfg, rng=0, num_runs=2)
        kl = float(gp_kl(self.model.transition, self.params["transition"]))
        assert gp_est.value == pytest.approx(base.value - kl, abs=1e-10)
        assert gp_est.per_step == pytest.approx(gp_est.value / 15)

    def test_weight_requires_gp_transition(self):
        model = linear_gaussian_model(1, 2)
        params = model.init(jax.random.PRNGKey(0))
        rec = HsmcStepRecord(jnp.zeros(1), jnp.zeros(1), jnp.zeros(1), jnp.zeros(1), jnp.zeros(1), jnp.zeros(0),
                             jnp.zeros(2), jnp.zeros(2))
        with pytest.raises(TypeError):
            gpssm_hsmc_weight(rec, model, params)
        x = jnp.array([0.2])
        rec = HsmcStepRecord(x, x, x, x, jnp.zeros(1), jnp.zeros(0), self.ys[1], self.ys[0])
        expected = self.model.bind(self.params).emission_logpdf(self.ys[1], x)
        assert float(gpssm_hsmc_weight(rec, self.model, self.params)) == float(expected)

    def test_unknown_emission(self):
        with pytest.raises(ValueError):
            gpssm_model(1, 1, emission="poisson")
