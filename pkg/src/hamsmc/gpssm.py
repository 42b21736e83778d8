"""Sparse variational GP transitions for GP state-space models.

Every latent dimension ``d`` has its own GP ``f_d ~ GP(0, k_d)`` over the
transition input ``xh = (x_{t-1}, u_t[, y_{t-1}])`` with an ARD RBF kernel.
The GP is summarized by ``P`` inducing targets ``z_d`` at inputs ``zeta_d``
with variational posterior ``q(z_d) = N(mu_d, Sigma_d)``. Marginalizing
``z_d`` gives the Gaussian transition ``q(x_d | xh) = N(mt_d, st2_d)`` with

    mt_d  = k^T K^-1 mu_d
    st2_d = k(xh, xh) - k^T K^-1 (K - Sigma_d) K^-1 k + noise_d

where ``k = k_d(zeta_d, xh)`` and ``K = k_d(zeta_d, zeta_d)``.
:class:`SparseGPTransition` exposes this as a transition component, so
every filter in :mod:`hamsmc.smc` and :mod:`hamsmc.hsmc` runs on GP-SSMs
unchanged; the ELBO subtracts ``sum_d KL(q(z_d) || p(z_d))`` once per
sequence.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.linalg import solve_triangular

from hamsmc.dist import DiagCov, Gaussian
from hamsmc.hsmc import HsmcConfig, HsmcStepRecord, elbo_hsmc, hsmc_weight
from hamsmc.numcore import NotPositiveDefiniteError, cholesky
from hamsmc.smc import ElboEstimate
from hamsmc.ssm import (
    DecoderGaussianEmission,
    GaussianInitial,
    LinearGaussianEmission,
    StateSpaceModel,
    TrajectoryBatch,
    tril_from_raw,
)

DEFAULT_JITTER = 1e-8


class RbfHyper(NamedTuple):
    signal_var: jax.Array  # scalar
    lengthscales: jax.Array  # (n,)


def rbf_kernel(a, b, hyper: RbfHyper):
    """ARD squared-exponential kernel.

    Args:
        a: a point ``(n,)`` or a set of points ``(N, n)``.
        b: a point ``(n,)`` or a set of points ``(M, n)``.
        hyper: signal variance and per-input lengthscales.

    Returns:
        A scalar for two points, otherwise the ``(N, M)`` cross-covariance
        (a single point is treated as a set of one on that side).
    """
    a = jnp.asarray(a, dtype=jnp.float64)
    b = jnp.asarray(b, dtype=jnp.float64)
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"input dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")
    scalar = a.ndim == 1 and b.ndim == 1
    a2 = jnp.atleast_2d(a) / hyper.lengthscales
    b2 = jnp.atleast_2d(b) / hyper.lengthscales
    diff = a2[:, None, :] - b2[None, :, :]
    k = hyper.signal_var * jnp.exp(-0.5 * jnp.sum(diff * diff, axis=-1))
    return k[0, 0] if scalar else k


def gram(points, hyper: RbfHyper, jitter: float = DEFAULT_JITTER):
    """Kernel matrix of ``points`` with ``jitter`` added to the diagonal."""
    k = rbf_kernel(points, points, hyper)
    return k + jitter * jnp.eye(k.shape[0])


class VariationalMoments(NamedTuple):
    mean: jax.Array  # (Dx,)
    var: jax.Array  # (Dx,)


@dataclasses.dataclass(frozen=True)
class SparseGPTransition:
    """Transition ``x_t ~ N(mt(xh), diag(st2(xh)))`` from independent sparse GPs.

    Parameters (leading axis ``d`` over latent dimensions):

    ``zeta`` ``(D, P, n)``, ``mu`` ``(D, P)``, ``chol_raw`` ``(D, P, P)``
    (Cholesky factor of ``Sigma_d`` with log diagonal), ``log_signal_var``
    ``(D,)``, ``log_lengthscales`` ``(D, n)``, ``log_noise`` ``(D,)``.

    With ``whiten=True`` the variational parameters are stored in whitened
    coordinates: ``mu_d = L_d m_d`` and ``chol(Sigma_d) = L_d L_S`` where
    ``L_d = chol(K_{zeta_d, zeta_d})``, so ``mu``/``chol_raw`` hold ``m_d``
    and ``L_S``. The prior is then ``N(0, I)`` and optimization is much
    better conditioned.
    """

    x_dim: int
    u_dim: int = 0
    y_dim: int = 0
    num_inducing: int = 16
    use_prev_obs: bool = False
    jitter: float = DEFAULT_JITTER
    whiten: bool = False

    @property
    def in_dim(self) -> int:
        return self.x_dim + self.u_dim + (self.y_dim if self.use_prev_obs else 0)

    def inputs(self, x_prev, u, y_prev):
        parts = [x_prev, u] + ([y_prev] if self.use_prev_obs else [])
        return jnp.concatenate(parts)

    def init(self, key, inputs=None, signal_var: float = 1.0, lengthscale: float = 1.0,
             noise_var: float = 0.01, q_var: float = 0.01):
        """Initial parameters.

        Args:
            key: PRNG key.
            inputs: optional ``(N, n)`` transition inputs from training data;
                inducing inputs are drawn from its rows (without replacement
                when ``N >= P``). Otherwise they are standard normal.
            signal_var: kernel signal variance.
            lengthscale: initial lengthscale for every input.
            noise_var: process-noise variance.
            q_var: initial ``Sigma_d = q_var I`` (whitened: ``Sigma_d = q_var K``).
        """
        D, P, n = self.x_dim, self.num_inducing, self.in_dim
        keys = jax.random.split(key, D + 1)
        if inputs is None:
            zeta = jax.random.normal(keys[0], (D, P, n), dtype=jnp.float64)
        else:
            inputs = jnp.asarray(inputs, dtype=jnp.float64)
            if inputs.ndim != 2 or inputs.shape[1] != n:
                raise ValueError(f"expected inputs of shape (N, {n}), got {inputs.shape}")
            replace = inputs.shape[0] < P
            zeta = jnp.stack([
                inputs[jax.random.choice(k, inputs.shape[0], (P,), replace=replace)] for k in keys[1:]
            ])
        return {
            "zeta": zeta,
            "mu": jnp.zeros((D, P)),
            "chol_raw": jnp.broadcast_to(0.5 * jnp.log(q_var) * jnp.eye(P), (D, P, P)),
            "log_signal_var": jnp.full(D, jnp.log(signal_var)),
            "log_lengthscales": jnp.full((D, n), jnp.log(lengthscale)),
            "log_noise": jnp.full(D, jnp.log(noise_var)),
        }

    def hyper(self, params) -> RbfHyper:
        """Per-dimension kernel hyperparameters (leading axis ``D``)."""
        return RbfHyper(jnp.exp(params["log_signal_var"]), jnp.exp(params["log_lengthscales"]))

    def prepare(self, params):
        """Factorizations shared by every query: ``chol K_d`` and ``L_K^-1 L_Sigma``."""

        def per_dim(zeta, mu, chol_raw, sf2, ls):
            hyp = RbfHyper(sf2, ls)
            lk = jnp.linalg.cholesky(gram(zeta, hyp, self.jitter))
            if self.whiten:
                return lk, mu, tril_from_raw(chol_raw)
            white_mean = solve_triangular(lk, mu, lower=True)
            white_cov = solve_triangular(lk, tril_from_raw(chol_raw), lower=True)
            return lk, white_mean, white_cov

        hyp = self.hyper(params)
        lk, white_mean, white_cov = jax.vmap(per_dim)(
            params["zeta"], params["mu"], params["chol_raw"], hyp.signal_var, hyp.lengthscales
        )
        return {
            "zeta": params["zeta"],
            "hyper": hyp,
            "noise": jnp.exp(params["log_noise"]),
            "chol_k": lk,
            "white_mean": white_mean,  # L_K^-1 mu
            "white_cov": white_cov,  # L_K^-1 L_Sigma
        }

    def moments(self, prep, xh) -> VariationalMoments:
        def per_dim(zeta, sf2, ls, lk, wm, wc, noise):
            hyp = RbfHyper(sf2, ls)
            v = solve_triangular(lk, rbf_kernel(zeta, xh, hyp)[:, 0], lower=True)
            mean = jnp.dot(v, wm)
            s = wc.T @ v
            var = sf2 - jnp.dot(v, v) + jnp.dot(s, s) + noise
            return mean, var

        h = prep["hyper"]
        mean, var = jax.vmap(per_dim)(
            prep["zeta"], h.signal_var, h.lengthscales, prep["chol_k"], prep["white_mean"],
            prep["white_cov"], prep["noise"],
        )
        return VariationalMoments(mean, var)

    def dist(self, prep, x_prev, u, y_prev) -> Gaussian:
        m = self.moments(prep, self.inputs(x_prev, u, y_prev))
        return Gaussian(m.mean, DiagCov(m.var))


def _is_concrete(*arrays) -> bool:
    return not any(isinstance(a, jax.core.Tracer) for a in jax.tree_util.tree_leaves(arrays))


def check_inducing(gp: SparseGPTransition, params) -> None:
    """Raise :class:`NotPositiveDefiniteError` if some ``K_{zeta_d, zeta_d}`` is not PD."""
    hyp = gp.hyper(params)
    for d in range(gp.x_dim):
        k = gram(params["zeta"][d], RbfHyper(hyp.signal_var[d], hyp.lengthscales[d]), gp.jitter)
        cholesky(np.asarray(k))


def var_moments(gp: SparseGPTransition, params, xh) -> VariationalMoments:
    """Variational transition moments at input ``xh``.

    Raises:
        NotPositiveDefiniteError: when evaluated eagerly and a Gram matrix
            of inducing inputs is not positive definite.
    """
    xh = jnp.asarray(xh, dtype=jnp.float64)
    if xh.shape != (gp.in_dim,):
        raise ValueError(f"expected input of shape ({gp.in_dim},), got {xh.shape}")
    if _is_concrete(params):
        check_inducing(gp, params)
    return gp.moments(gp.prepare(params), xh)


def gp_kl(gp: SparseGPTransition, params):
    """``sum_d KL(N(mu_d, Sigma_d) || N(0, K_{zeta_d, zeta_d}))``."""
    if _is_concrete(params):
        check_inducing(gp, params)
    prep = gp.prepare(params)

    def per_dim(lk, wm, wc):
        P = wm.shape[0]
        # KL(N(L^-1 mu, L^-1 Sigma L^-T) || N(0, I)); log|K| - log|Sigma| = -2 log|L^-1 L_Sigma|.
        logdet_ratio = -2.0 * jnp.sum(jnp.log(jnp.abs(jnp.diagonal(wc))))
        return 0.5 * (jnp.sum(wc * wc) + jnp.dot(wm, wm) - P + logdet_ratio)

    return jnp.sum(jax.vmap(per_dim)(prep["chol_k"], prep["white_mean"], prep["white_cov"]))


def gpssm_model(x_dim: int, y_dim: int, u_dim: int = 0, num_inducing: int = 16, emission: str = "decoder",
                decoder_hidden: int = 16, use_prev_obs: bool = False,
                jitter: float = DEFAULT_JITTER, whiten: bool = True) -> StateSpaceModel:
    """GP-SSM with a Gaussian initial state and a decoder (or linear) Gaussian emission."""
    if emission == "decoder":
        em = DecoderGaussianEmission(x_dim, y_dim, decoder_hidden, activation="tanh", output="linear")
    elif emission == "linear":
        em = LinearGaussianEmission(x_dim, y_dim)
    else:
        raise ValueError(f"unknown emission family {emission!r}")
    tr = SparseGPTransition(x_dim, u_dim, y_dim, num_inducing, use_prev_obs, jitter, whiten)
    return StateSpaceModel(GaussianInitial(x_dim, u_dim), tr, em)


def _gp(model: StateSpaceModel) -> SparseGPTransition:
    if not isinstance(model.transition, SparseGPTransition):
        raise TypeError("model transition is not a SparseGPTransition")
    return model.transition


def gpssm_hsmc_weight(rec: HsmcStepRecord, model: StateSpaceModel, params, metric=None):
    """HSMC log weight with the variational GP transition as ``f``."""
    _gp(model)
    return hsmc_weight(rec, model, params, metric)


def elbo_gpssm(model: StateSpaceModel, params, field, phi, batch: TrajectoryBatch, cfg: HsmcConfig,
               rng=0, num_runs: int = 1) -> ElboEstimate:
    """Batch-mean ``log Z_HSMC`` minus the inducing-point KL (one KL per sequence)."""
    kl = float(gp_kl(_gp(model), params["transition"]))
    est = elbo_hsmc(model, params, field, phi, batch, cfg, rng, num_runs)
    value = est.value - kl
    return ElboEstimate(value, est.se, est.per_run - kl, value / float(np.mean(batch.lengths)))
