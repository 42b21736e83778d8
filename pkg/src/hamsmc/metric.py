"""Position-dependent mass matrix ``M(x) = diag(softplus(u(x)) + jitter) + V(x) V(x)^T``.

``u`` and ``V`` are small MLPs of the latent state. The diagonal part is
positive by construction, so ``M(x)`` is positive definite everywhere.
Solves and log-determinants use the Woodbury identity and the matrix
determinant lemma on the ``rank x rank`` capacitance matrix.
"""

from __future__ import annotations

import dataclasses
from typing import NamedTuple

import jax
import jax.numpy as jnp

from hamsmc.nets import inv_softplus, mlp_apply, mlp_init


class MetricEval(NamedTuple):
    """``M = diag(d) + V V^T`` at one point, with the capacitance factor cached."""

    d: jax.Array  # (D,)
    V: jax.Array  # (D, r)
    cap_chol: jax.Array  # chol(I_r + V^T diag(d)^-1 V)

    @property
    def dim(self) -> int:
        return self.d.shape[0]

    def solve(self, b):
        vector = b.ndim == 1
        b2 = b[:, None] if vector else b
        db = b2 / self.d[:, None]
        inner = jax.scipy.linalg.cho_solve((self.cap_chol, True), self.V.T @ db)
        out = db - (self.V / self.d[:, None]) @ inner
        return out[:, 0] if vector else out

    def logdet(self):
        return jnp.sum(jnp.log(self.d)) + 2.0 * jnp.sum(jnp.log(jnp.diagonal(self.cap_chol)))

    def dense(self):
        return jnp.diag(self.d) + self.V @ self.V.T

    def factor_apply(self, xi):
        return jnp.linalg.cholesky(self.dense()) @ xi


def make_metric_eval(d, V) -> MetricEval:
    V = V.reshape(d.shape[0], -1)
    cap = jnp.eye(V.shape[1]) + (V / d[:, None]).T @ V
    return MetricEval(d, V, jnp.linalg.cholesky(cap))


def identity_eval(dim: int) -> MetricEval:
    return make_metric_eval(jnp.ones(dim), jnp.zeros((dim, 1)))


@dataclasses.dataclass(frozen=True)
class MetricField:
    """Learnable metric field; parameters live in a separate pytree ``phi``."""

    dim: int
    rank: int = 1
    hidden: int = 32
    jitter: float = 1e-4
    activation: str = "tanh"

    def init(self, key, scale: float = 1.0):
        """Random parameters; ``scale`` multiplies every weight matrix."""
        ku, kv = jax.random.split(key)
        return {
            "u": mlp_init(ku, [self.dim, self.hidden, self.dim], scale),
            "nu": mlp_init(kv, [self.dim, self.hidden, self.dim * self.rank], scale),
        }

    def constant_params(self, diag, V=None):
        """Parameters giving the position-independent ``M = diag(diag) + V V^T``."""
        diag = jnp.asarray(diag, dtype=jnp.float64)
        V = jnp.zeros((self.dim, self.rank)) if V is None else jnp.asarray(V, dtype=jnp.float64)
        phi = self.init(jax.random.PRNGKey(0), scale=0.0)
        phi["u"][-1]["b"] = inv_softplus(diag - self.jitter)
        phi["nu"][-1]["b"] = V.reshape(self.dim * self.rank)
        return phi

    def identity_params(self):
        return self.constant_params(jnp.ones(self.dim))

    def raw(self, phi, x):
        """Pre-activation diagonal ``u(x)`` and factor ``V(x)``."""
        a = mlp_apply(phi["u"], x, self.activation)
        V = mlp_apply(phi["nu"], x, self.activation).reshape(self.dim, self.rank)
        return a, V

    def __call__(self, phi, x) -> MetricEval:
        return metric_eval(self, phi, x)


def metric_eval(field: MetricField, phi, x) -> MetricEval:
    if x.shape != (field.dim,):
        raise ValueError(f"expected position of shape ({field.dim},), got {x.shape}")
    a, V = field.raw(phi, x)
    return make_metric_eval(jax.nn.softplus(a) + field.jitter, V)


def metric_solve(m: MetricEval, b):
    """``M^{-1} b`` by Sherman-Morrison-Woodbury."""
    return m.solve(b)


def metric_logdet(m: MetricEval):
    return m.logdet()


def metric_jet(field: MetricField, phi, x):
    """``M(x)`` with first derivatives of its diagonal and factor.

    Returns ``(m, dd, dV)`` where ``dd[j, i] = d d_j / d x_i`` and
    ``dV[j, l, i] = d V_jl / d x_i``.
    """
    a, V = field.raw(phi, x)
    da = jax.jacfwd(lambda z: field.raw(phi, z)[0])(x)
    dV = jax.jacfwd(lambda z: field.raw(phi, z)[1])(x)
    dd = jax.nn.sigmoid(a)[:, None] * da
    return make_metric_eval(jax.nn.softplus(a) + field.jitter, V), dd, dV


def metric_dx(field: MetricField, phi, x):
    """Stack of ``dM/dx_i`` for ``i = 1..D``; shape ``(D, D, D)``, each slice symmetric."""
    m, dd, dV = metric_jet(field, phi, x)
    diag_part = jax.vmap(jnp.diag, in_axes=1)(dd)
    outer = jnp.einsum("jli,kl->ijk", dV, m.V)
    return diag_part + outer + jnp.swapaxes(outer, 1, 2)
