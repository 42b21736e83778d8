"""Hamiltonian dynamics with a position-dependent mass matrix.

The Riemannian Hamiltonian is

    H(x, p) = -L(x) + 1/2 p^T M(x)^{-1} p + 1/2 log((2 pi)^D |M(x)|)

so that ``exp(-H) = exp(L(x)) N(p | 0, M(x))``. Three integrators are
provided:

``generalized-implicit``
    the generalized leapfrog: implicit half-step in momentum, implicit
    full step in position, explicit half-step in momentum. Symplectic and
    reversible up to the fixed-point tolerance. Default.
``explicit``
    the fully explicit scheme ``p~ = p + eps/2 F(x, p); x += eps M(x)^{-1} p~;
    p = p~ + eps/2 F(x, p~)``. Neither reversible nor volume preserving for
    position-dependent metrics; kept for ablations. ``flip_momentum_sign=True``
    flips the momentum updates to ``-eps/2``.
``constant-metric``
    standard Stoermer-Verlet leapfrog; metric derivatives are ignored.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Any, Callable, NamedTuple

import jax
import jax.numpy as jnp

from hamsmc.metric import MetricEval, MetricField, identity_eval, metric_eval, metric_jet
from hamsmc.numcore import as_key, derive_key, fd_check

VARIANTS = ("generalized-implicit", "explicit", "constant-metric")


class IntegratorError(RuntimeError):
    def __init__(self, residual: float):
        super().__init__(f"fixed-point iteration did not converge (residual {residual:.3e})")
        self.residual = residual


class PhaseState(NamedTuple):
    x: jax.Array
    p: jax.Array


@dataclasses.dataclass(frozen=True)
class IntegratorConfig:
    step_size: float = 0.05
    n_steps: int = 10
    variant: str = "generalized-implicit"
    max_iter: int = 6
    tol: float = 1e-10
    flip_momentum_sign: bool = False
    # Enforce S * eps < 1. The standalone sampler may lift this.
    strict: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown integrator variant {self.variant!r}")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if self.n_steps < 0:
            raise ValueError("number of steps must be nonnegative")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.strict and self.n_steps * self.step_size >= 1:
            raise ValueError(
                f"n_steps * step_size must be < 1 (got {self.n_steps} * {self.step_size})"
            )


@jax.tree_util.register_dataclass
@dataclasses.dataclass(frozen=True)
class BoundMetric:
    """A metric field together with its parameters."""

    phi: Any
    field: MetricField = dataclasses.field(metadata=dict(static=True))

    def evaluate(self, x) -> MetricEval:
        return metric_eval(self.field, self.phi, x)

    def jet(self, x):
        return metric_jet(self.field, self.phi, x)


def bind(field: MetricField, phi) -> BoundMetric:
    return BoundMetric(phi=phi, field=field)


def _evaluate(metric, x) -> MetricEval:
    return identity_eval(x.shape[0]) if metric is None else metric.evaluate(x)


@dataclasses.dataclass(frozen=True)
class Potential:
    """Log-density ``L(x)`` with its gradient."""

    fn: Callable

    def __call__(self, x):
        return self.fn(x)

    def grad(self, x):
        return jax.grad(self.fn)(x)

    def spot_check(self, x, h: float = 1e-5) -> float:
        return fd_check(self.fn, x, h)


def energy(state: PhaseState, log_density, metric=None, riemannian: bool = True):
    """Hamiltonian energy; ``riemannian`` adds the log-normalizer of ``N(0, M(x))``."""
    x, p = state
    m = _evaluate(metric, x)
    h = -log_density(x) + 0.5 * jnp.dot(p, m.solve(p))
    if riemannian:
        h = h + 0.5 * (x.shape[0] * math.log(2.0 * math.pi) + m.logdet())
    return h


def _metric_force_terms(m: MetricEval, dd, dV, p):
    """``-1/2 tr(M^-1 dM_i) + 1/2 p^T M^-1 dM_i M^-1 p`` for each coordinate i."""
    eye = jnp.eye(m.dim)
    minv = m.solve(eye)
    trace = jnp.diagonal(minv) @ dd + 2.0 * jnp.einsum("jl,jli->i", minv @ m.V, dV)
    w = m.solve(p)
    quad = (w * w) @ dd + 2.0 * jnp.einsum("l,jli,j->i", m.V.T @ w, dV, w)
    return -0.5 * trace + 0.5 * quad


def force(state: PhaseState, log_density, metric=None):
    """Momentum time-derivative ``-dH/dx``."""
    x, p = state
    grad_l = jax.grad(log_density)(x)
    if metric is None:
        return grad_l
    m, dd, dV = metric.jet(x)
    return grad_l + _metric_force_terms(m, dd, dV, p)


def _max_abs(v):
    return jnp.max(jnp.abs(v))


def _generalized_step(state, log_density, metric, cfg):
    x, p = state
    half = 0.5 * cfg.step_size
    grad_l = jax.grad(log_density)(x)
    if metric is None:
        p_half = p + half * grad_l
        x_new = x + cfg.step_size * p_half
        p_new = p_half + half * jax.grad(log_density)(x_new)
        return PhaseState(x_new, p_new), jnp.zeros(())

    m, dd, dV = metric.jet(x)

    def p_update(_, carry):
        ph, _ = carry
        nxt = p + half * (grad_l + _metric_force_terms(m, dd, dV, ph))
        return nxt, _max_abs(nxt - ph)

    p_half, res_p = jax.lax.fori_loop(0, cfg.max_iter, p_update, (p, jnp.array(jnp.inf)))

    v0 = m.solve(p_half)

    def x_update(_, carry):
        xn, _ = carry
        nxt = x + half * (v0 + metric.evaluate(xn).solve(p_half))
        return nxt, _max_abs(nxt - xn)

    x_new, res_x = jax.lax.fori_loop(0, cfg.max_iter, x_update, (x + cfg.step_size * v0, jnp.array(jnp.inf)))
    p_new = p_half + half * force(PhaseState(x_new, p_half), log_density, metric)
    return PhaseState(x_new, p_new), jnp.maximum(res_p, res_x)


def _explicit_step(state, log_density, metric, cfg):
    x, p = state
    half = (-0.5 if cfg.flip_momentum_sign else 0.5) * cfg.step_size
    p_tilde = p + half * force(PhaseState(x, p), log_density, metric)
    x_new = x + cfg.step_size * _evaluate(metric, x).solve(p_tilde)
    p_new = p_tilde + half * force(PhaseState(x_new, p_tilde), log_density, metric)
    return PhaseState(x_new, p_new), jnp.zeros(())


def _constant_step(state, log_density, metric, cfg):
    x, p = state
    half = 0.5 * cfg.step_size
    p_half = p + half * jax.grad(log_density)(x)
    x_new = x + cfg.step_size * _evaluate(metric, x).solve(p_half)
    p_new = p_half + half * jax.grad(log_density)(x_new)
    return PhaseState(x_new, p_new), jnp.zeros(())


_STEPS = {
    "generalized-implicit": _generalized_step,
    "explicit": _explicit_step,
    "constant-metric": _constant_step,
}


def step_with_residual(state, log_density, metric, cfg: IntegratorConfig):
    """One integrator step; returns ``(state, fixed-point residual)``."""
    return _STEPS[cfg.variant](PhaseState(*state), log_density, metric, cfg)


def _raise_if_unconverged(residual, tol):
    try:
        value = float(residual)
    except jax.errors.ConcretizationTypeError:
        return
    if not value <= tol:
        raise IntegratorError(value)


def leapfrog_step(state, log_density, metric=None, cfg: IntegratorConfig = IntegratorConfig()) -> PhaseState:
    """One leapfrog step; raises :class:`IntegratorError` if the implicit solves fail."""
    new, residual = step_with_residual(state, log_density, metric, cfg)
    _raise_if_unconverged(residual, cfg.tol)
    return new


class Trajectory(NamedTuple):
    state: PhaseState
    energies: jax.Array  # (S + 1,) Riemannian energy along the path
    residual: jax.Array  # largest fixed-point residual over all steps


def _transform(state, log_density, metric, cfg, trace_energy: bool):
    state = PhaseState(*state)

    def body(carry, _):
        s, worst = carry
        s_new, res = step_with_residual(s, log_density, metric, cfg)
        e = energy(s_new, log_density, metric) if trace_energy else jnp.zeros(())
        return (s_new, jnp.maximum(worst, res)), e

    (final, residual), energies = jax.lax.scan(body, (state, jnp.zeros(())), None, length=cfg.n_steps)
    return final, residual, energies


def rmhmc_transform(state, log_density, metric=None, cfg: IntegratorConfig = IntegratorConfig(),
                    trace_energy: bool = True) -> Trajectory:
    """Apply ``cfg.n_steps`` integrator steps without accept/reject."""
    state = PhaseState(*state)
    final, residual, energies = _transform(state, log_density, metric, cfg, trace_energy)
    if trace_energy:
        e0 = energy(state, log_density, metric)
        energies = jnp.concatenate([e0[None], energies])
    return Trajectory(final, energies, residual)


class HmcResult(NamedTuple):
    samples: jax.Array
    accept_rate: jax.Array


def hmc_sample(rng, log_density, metric, cfg: IntegratorConfig, num_samples: int, x0) -> HmcResult:
    """Metropolis-corrected (RM)HMC with momentum refresh ``p ~ N(0, M(x))``.

    Proposals whose implicit solves fail or whose energy is not finite are
    rejected.
    """
    key = as_key(rng)
    x0 = jnp.asarray(x0, dtype=jnp.float64)

    @jax.jit
    def run(key, x0):
        def body(x, i):
            k_mom, k_acc = jax.random.split(derive_key(key, i))
            m = _evaluate(metric, x)
            p = m.factor_apply(jax.random.normal(k_mom, x.shape, dtype=jnp.float64))
            start = PhaseState(x, p)
            h0 = energy(start, log_density, metric)
            end, residual, _ = _transform(start, log_density, metric, cfg, False)
            h1 = energy(end, log_density, metric)
            log_ratio = jnp.where(jnp.isfinite(h1), h0 - h1, -jnp.inf)
            ok = (residual <= cfg.tol) & jnp.all(jnp.isfinite(end.x))
            accept = ok & (jnp.log(jax.random.uniform(k_acc, dtype=jnp.float64)) < log_ratio)
            x_next = jnp.where(accept, end.x, x)
            return x_next, (x_next, accept)

        _, (xs, accepted) = jax.lax.scan(body, x0, jnp.arange(num_samples))
        return xs, jnp.mean(accepted)

    samples, rate = run(key, x0)
    return HmcResult(samples, rate)
