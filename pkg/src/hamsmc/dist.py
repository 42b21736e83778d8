"""Gaussian, categorical and Poisson distributions.

A Gaussian is a mean plus a covariance object. Covariance objects share a
small protocol (``dim``, ``solve``, ``logdet``, ``factor_apply``, ``dense``)
so that full, diagonal and the low-rank metric representation
(:class:`hamsmc.metric.MetricEval`) can be used interchangeably.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl
import numpy as np
from jax.scipy.special import gammaln, logsumexp

from hamsmc.numcore import as_key

LOG_2PI = math.log(2.0 * math.pi)

RESAMPLING_SCHEMES = ("multinomial", "systematic")


class DegeneracyError(RuntimeError):
    """All particle weights vanished."""

    def __init__(self, message: str = "all weights are zero", t: int | None = None):
        if t is not None:
            message = f"{message} at time step {t}"
        super().__init__(message)
        self.t = t


class FullCov(NamedTuple):
    scale_tril: jax.Array

    @property
    def dim(self) -> int:
        return self.scale_tril.shape[-1]

    def solve(self, b):
        return jsl.cho_solve((self.scale_tril, True), b)

    def whiten(self, r):
        return jsl.solve_triangular(self.scale_tril, r, lower=True)

    def logdet(self):
        return 2.0 * jnp.sum(jnp.log(jnp.diagonal(self.scale_tril)))

    def factor_apply(self, xi):
        return self.scale_tril @ xi

    def dense(self):
        return self.scale_tril @ self.scale_tril.T


class DiagCov(NamedTuple):
    var: jax.Array

    @property
    def dim(self) -> int:
        return self.var.shape[-1]

    def solve(self, b):
        return b / self.var if b.ndim == 1 else b / self.var[:, None]

    def whiten(self, r):
        return r / jnp.sqrt(self.var)

    def logdet(self):
        return jnp.sum(jnp.log(self.var))

    def factor_apply(self, xi):
        return jnp.sqrt(self.var) * xi

    def dense(self):
        return jnp.diag(self.var)


class Gaussian(NamedTuple):
    mean: jax.Array
    cov: FullCov | DiagCov  # or hamsmc.metric.MetricEval

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def full_gaussian(mean, cov_matrix) -> Gaussian:
    """Gaussian from a dense covariance matrix (factorized here)."""
    return Gaussian(jnp.asarray(mean), FullCov(jnp.linalg.cholesky(jnp.asarray(cov_matrix))))


def diag_gaussian(mean, var) -> Gaussian:
    return Gaussian(jnp.asarray(mean), DiagCov(jnp.asarray(var)))


def _check_dim(x, g: Gaussian):
    if jnp.shape(x)[-1:] != (g.dim,) or g.cov.dim != g.dim:
        raise ValueError(
            f"dimension mismatch: x has shape {jnp.shape(x)}, mean has {g.dim}, "
            f"covariance has {g.cov.dim}"
        )


def gauss_logpdf(x, g: Gaussian):
    """Log-density of ``x`` under ``g``."""
    _check_dim(x, g)
    r = x - g.mean
    if hasattr(g.cov, "whiten"):
        z = g.cov.whiten(r)
        maha = jnp.dot(z, z)
    else:
        maha = jnp.dot(r, g.cov.solve(r))
    return -0.5 * maha - 0.5 * g.cov.logdet() - 0.5 * g.dim * LOG_2PI


def gauss_sample(rng, g: Gaussian):
    """Reparameterized draw ``mean + L xi``; returns ``(value, xi)``."""
    xi = jax.random.normal(as_key(rng), (g.dim,), dtype=jnp.float64)
    return g.mean + g.cov.factor_apply(xi), xi


def kl_gauss(q: Gaussian, p: Gaussian):
    """Closed-form ``KL(q || p)``."""
    if q.dim != p.dim:
        raise ValueError(f"dimension mismatch: {q.dim} vs {p.dim}")
    diff = p.mean - q.mean
    trace = jnp.trace(p.cov.solve(q.cov.dense()))
    maha = jnp.dot(diff, p.cov.solve(diff))
    return 0.5 * (trace + maha - q.dim + p.cov.logdet() - q.cov.logdet())


def poisson_logpdf(y, rate):
    """Summed Poisson log-mass of counts ``y`` at positive ``rate``."""
    return jnp.sum(y * jnp.log(rate) - rate - gammaln(y + 1.0))


def resample(key, log_weights, num: int | None = None, scheme: str = "multinomial"):
    """Ancestor indices drawn proportionally to ``exp(log_weights)``.

    Jittable; degeneracy (all weights zero) is not detected here.
    """
    num = log_weights.shape[0] if num is None else num
    if scheme not in RESAMPLING_SCHEMES:
        raise ValueError(f"unknown resampling scheme {scheme!r}; expected one of {RESAMPLING_SCHEMES}")
    # Inverse-CDF lookup for both schemes: O(K) memory, unlike Gumbel-max over a (num, K) grid.
    cdf = jnp.cumsum(jnp.exp(log_weights - logsumexp(log_weights)))
    if scheme == "multinomial":
        u = jax.random.uniform(key, (num,), dtype=jnp.float64)
    else:
        u = (jnp.arange(num) + jax.random.uniform(key, dtype=jnp.float64)) / num
    idx = jnp.searchsorted(cdf, u * cdf[-1], side="right")
    return jnp.clip(idx, 0, log_weights.shape[0] - 1)


def categorical_sample(rng, weights, scheme: str = "multinomial", num: int | None = None) -> np.ndarray:
    """Draw ancestor indices from unnormalized nonnegative ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if not np.any(w > 0):
        raise DegeneracyError()
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    return np.asarray(resample(as_key(rng), jnp.asarray(log_w), num, scheme))
