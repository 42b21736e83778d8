"""Sequential Monte Carlo with log-space weights.

All filters here share one engine (:func:`run_filter`): particles are
initialized from the initial-state density and weighted by the emission,
then at every later step ancestors are resampled (always; multinomial by
default), a move function proposes new particles and returns their log
weights. Random keys are derived from ``(seed, t, purpose, k)`` so that
two filters with the same seed see the same transition noise.
"""

from __future__ import annotations

import functools
import math
from typing import Any, Callable, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import logsumexp

from hamsmc.dist import DegeneracyError, Gaussian, gauss_logpdf, resample
from hamsmc.numcore import as_key, derive_key
from hamsmc.ssm import StateSpaceModel, TrajectoryBatch


class FilterResult(NamedTuple):
    log_z: jax.Array
    log_mean_weights: jax.Array  # (T,) log(mean_k w_t^k)
    ess: jax.Array  # (T,)
    log_weights: jax.Array  # (T, K)
    ancestors: jax.Array  # (T, K); row 0 is the identity
    particles: jax.Array  # (T, K, Dx)
    fallbacks: jax.Array  # integrator failures reverted to S = 0
    energy_error: jax.Array  # mean |H(x^S, p^S) - H(x^0, p^0)| over moved particles

    def to_json(self) -> dict:
        out = {
            "logZ": float(self.log_z),
            "per_step_log_mean_w": [float(v) for v in np.asarray(self.log_mean_weights)],
            "ess": [float(v) for v in np.asarray(self.ess)],
        }
        return out


def log_ess(log_weights):
    return 2.0 * logsumexp(log_weights) - logsumexp(2.0 * log_weights)


def ess(weights) -> float:
    """Effective sample size ``(sum w)^2 / sum w^2`` of nonnegative weights."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    total = w.sum()
    if not total > 0:
        raise DegeneracyError()
    return float(total * total / np.dot(w, w))


def particle_normal(key, k, dim):
    return jax.random.normal(jax.random.fold_in(key, k), (dim,), dtype=jnp.float64)


def draw(g: Gaussian, xi):
    return g.mean + g.cov.factor_apply(xi)


class Move(NamedTuple):
    x: jax.Array
    log_w: jax.Array
    fallback: jax.Array
    energy_error: jax.Array


def run_filter(bound, ys, us, key, num_particles: int, scheme: str, move: Callable) -> FilterResult:
    """Shared SMC recursion.

    ``move(key_t, k, x_prev, u, y, y_prev) -> Move`` handles one particle
    at ``t >= 2``; it is vmapped over particles.
    """
    K = num_particles
    particles = jnp.arange(K)
    dx = bound.model.x_dim

    k_init = derive_key(key, 0, "initial")
    init_g = bound.initial_dist(us[0])
    x1 = jax.vmap(lambda k: draw(init_g, particle_normal(k_init, k, dx)))(particles)
    lw1 = jax.vmap(lambda x: bound.emission_logpdf(ys[0], x))(x1)

    def step(carry, inputs):
        x, lw = carry
        t, y, u, y_prev = inputs
        key_t = derive_key(key, t)
        idx = resample(derive_key(key_t, "resample"), lw, K, scheme)
        x_prev = x[idx]
        out = jax.vmap(lambda k, xp: move(key_t, k, xp, u, y, y_prev))(particles, x_prev)
        stats = (jnp.sum(out.fallback), jnp.sum(out.energy_error))
        return (out.x, out.log_w), (out.x, out.log_w, idx, stats)

    T = ys.shape[0]
    inputs = (jnp.arange(1, T), ys[1:], us[1:], ys[:-1])
    _, (xs, lws, idx, (fallbacks, errors)) = jax.lax.scan(step, (x1, lw1), inputs)
    xs = jnp.concatenate([x1[None], xs])
    lws = jnp.concatenate([lw1[None], lws])
    ancestors = jnp.concatenate([particles[None], idx])
    log_mean_w = logsumexp(lws, axis=1) - math.log(K)
    n_moved = max((T - 1) * K, 1)
    return FilterResult(
        log_z=jnp.sum(log_mean_w),
        log_mean_weights=log_mean_w,
        ess=jnp.exp(jax.vmap(log_ess)(lws)),
        log_weights=lws,
        ancestors=ancestors,
        particles=xs,
        fallbacks=jnp.sum(fallbacks),
        energy_error=jnp.sum(errors) / n_moved,
    )


def bootstrap_move(bound):
    dx = bound.model.x_dim

    def move(key_t, k, x_prev, u, y, y_prev):
        f = bound.transition_dist(x_prev, u, y_prev)
        x = draw(f, particle_normal(derive_key(key_t, "transition"), k, dx))
        return Move(x, bound.emission_logpdf(y, x), jnp.zeros((), jnp.int32), jnp.zeros(()))

    return move


def proposal_move(bound, proposal: Callable, q_params):
    """Weights ``f g / q`` for a Gaussian proposal ``proposal(q_params, x_prev, u, y, y_prev)``."""
    dx = bound.model.x_dim

    def move(key_t, k, x_prev, u, y, y_prev):
        q = proposal(q_params, x_prev, u, y, y_prev)
        x = draw(q, particle_normal(derive_key(key_t, "transition"), k, dx))
        log_w = bound.emission_logpdf(y, x) + bound.transition_logpdf(x, x_prev, u, y_prev) - gauss_logpdf(x, q)
        return Move(x, log_w, jnp.zeros((), jnp.int32), jnp.zeros(()))

    return move


def _as_arrays(ys, us, model):
    ys = jnp.asarray(ys, dtype=jnp.float64)
    us = jnp.zeros((ys.shape[0], model.u_dim)) if us is None else jnp.asarray(us, dtype=jnp.float64)
    return ys, us


@functools.partial(jax.jit, static_argnames=("model", "num_particles", "scheme", "proposal"))
def _smc(model, params, ys, us, key, num_particles, scheme, proposal=None, q_params=None):
    bound = model.bind(params)
    move = bootstrap_move(bound) if proposal is None else proposal_move(bound, proposal, q_params)
    return run_filter(bound, ys, us, key, num_particles, scheme, move)


def check_degeneracy(result: FilterResult) -> FilterResult:
    lmw = np.asarray(result.log_mean_weights)
    bad = np.flatnonzero(~np.isfinite(lmw) & ~np.isnan(lmw))
    if bad.size:
        raise DegeneracyError(t=int(bad[0]) + 1)
    return result


def smc_filter(model: StateSpaceModel, params, ys, us=None, rng=0, num_particles: int = 10,
               scheme: str = "multinomial", proposal=None, q_params=None) -> FilterResult:
    """Particle filter on one sequence; bootstrap when ``proposal`` is None.

    Raises:
        DegeneracyError: if every weight at some step is zero (``t`` is 1-based).
    """
    if num_particles < 1:
        raise ValueError("need at least one particle")
    ys, us = _as_arrays(ys, us, model)
    res = _smc(model, params, ys, us, as_key(rng), num_particles, scheme, proposal, q_params)
    return check_degeneracy(res)


class ElboEstimate(NamedTuple):
    value: float  # mean over runs of the batch-mean log Z
    se: float
    per_run: np.ndarray  # (R,)
    per_step: float  # value divided by mean sequence length

    def to_json(self) -> dict:
        return {"elbo": self.value, "se": self.se, "per_step": self.per_step}


def run_keys(rng, num_runs: int):
    base = as_key(rng)
    return jax.vmap(lambda r: derive_key(base, r, "run"))(jnp.arange(num_runs))


def batch_log_z(filter_fn: Callable, batch: TrajectoryBatch, keys) -> np.ndarray:
    """``(R,)`` batch-mean log Z. ``filter_fn(ys, us, key) -> log Z`` for one sequence.

    Sequences are grouped by length; each group is vmapped over runs and
    sequences. Sequence ``i`` in run ``r`` uses key ``fold_in(key_r, i)``.
    """
    totals = np.zeros(keys.shape[0])
    by_len: dict[int, list[int]] = {}
    for i, n in enumerate(batch.lengths):
        by_len.setdefault(n, []).append(i)
    vfilter = jax.jit(jax.vmap(jax.vmap(filter_fn, in_axes=(0, 0, 0)), in_axes=(None, None, 0)))
    for idx in by_len.values():
        ys = jnp.asarray(np.stack([batch.ys[i] for i in idx]))
        us = jnp.asarray(np.stack([batch.us[i] for i in idx]))
        seq_keys = jax.vmap(lambda k: jax.vmap(lambda i: jax.random.fold_in(k, i))(jnp.asarray(idx)))(keys)
        totals += np.asarray(vfilter(ys, us, seq_keys)).sum(axis=1)
    return totals / len(batch)


def summarize(per_run: np.ndarray, batch: TrajectoryBatch) -> ElboEstimate:
    per_run = np.asarray(per_run, dtype=np.float64)
    R = per_run.size
    se = float(per_run.std(ddof=1) / np.sqrt(R)) if R > 1 else float("nan")
    value = float(per_run.mean())
    return ElboEstimate(value, se, per_run, value / float(np.mean(batch.lengths)))


def elbo_smc(model: StateSpaceModel, params, batch: TrajectoryBatch, num_particles: int, rng=0,
             num_runs: int = 1, scheme: str = "multinomial") -> ElboEstimate:
    """Monte Carlo estimate of ``E[log Z_SMC]`` (bootstrap proposal) over ``num_runs`` runs."""
    if num_runs < 1:
        raise ValueError("need at least one run")

    def one(ys, us, key):
        return _smc(model, params, ys, us, key, num_particles, scheme).log_z

    return summarize(batch_log_z(one, batch, run_keys(rng, num_runs)), batch)


@functools.partial(jax.jit, static_argnames=("model", "num_particles"))
def _predict(model, params, ys, us, key, num_particles):
    bound = model.bind(params)
    res = run_filter(bound, ys, us, key, num_particles, "multinomial", bootstrap_move(bound))
    dx = model.x_dim

    def one(t, x, lw, u, y_prev):
        w = jax.nn.softmax(lw)
        k_t = derive_key(key, t, "predict")
        draw_x = jax.vmap(
            lambda k, xp: draw(bound.transition_dist(xp, u, y_prev), particle_normal(k_t, k, dx))
        )(jnp.arange(num_particles), x)
        return w @ jax.vmap(bound.emission_mean)(draw_x)

    T = ys.shape[0]
    return jax.vmap(one)(jnp.arange(1, T), res.particles[:-1], res.log_weights[:-1], us[1:], ys[:-1])


def one_step_predict(model: StateSpaceModel, params, ys, us=None, rng=0, num_particles: int = 100):
    """Predictive means ``E[y_t | y_{1:t-1}]`` for ``t = 2..T`` from a bootstrap filter.

    Each weighted particle at ``t - 1`` is pushed through one transition
    draw and the emission means are averaged with the normalized weights.
    """
    ys, us = _as_arrays(ys, us, model)
    return _predict(model, params, ys, us, as_key(rng), num_particles)
