"""Numerical substrate: checked reverse-mode gradients, finite-difference
checks, Cholesky factorization and keyed random streams.

Array arithmetic and reverse-mode differentiation are delegated to JAX in
64-bit mode. What this module adds on top is a whitelist of differentiable
primitives (anything else is refused with :class:`UnsupportedOpError`),
the finite-difference oracle used throughout the test-suite, and a
counter-based random stream keyed by ``(time, particle, purpose)``.
"""

from __future__ import annotations

import dataclasses
import zlib
from typing import Any, Callable, Hashable

import jax
import jax.numpy as jnp
import numpy as np
from jax.extend import core as jcore
from jax.flatten_util import ravel_pytree
from scipy.linalg import lapack


class UnsupportedOpError(TypeError):
    """A traced expression used a primitive outside the differentiable set."""

    def __init__(self, op: str):
        super().__init__(f"operation '{op}' is not in the differentiable op set")
        self.op = op


class NonFiniteError(FloatingPointError):
    pass


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky failed; ``pivot`` is the 1-based order of the failing leading minor."""

    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (failure at pivot {pivot})")
        self.pivot = pivot


# Primitives allowed on a differentiated path. Structural primitives (reshape,
# slicing, control flow with fixed trip count, ...) are included; piecewise
# constant float maps (floor, round, sign, ...) and unbounded loops are not.
# Primitives whose outputs are all integer or boolean (ancestor indices, PRNG
# bits) never carry gradient and are accepted regardless.
SUPPORTED_OPS = frozenset(
    {
        # arithmetic
        "add", "add_any", "sub", "mul", "div", "neg", "integer_pow", "pow",
        "square", "sqrt", "rsqrt", "abs", "max", "min", "dot_general",
        "reduce_sum", "reduce_max", "reduce_min", "cumsum", "cumlogsumexp",
        "cummax",
        # elementwise transcendental
        "exp", "exp2", "expm1", "log", "log1p", "tanh", "logistic", "sin",
        "cos", "lgamma", "digamma", "erf", "erf_inv",
        # linear algebra
        "cholesky", "triangular_solve", "lu", "custom_linear_solve",
        # selection
        "select_n", "clamp", "stop_gradient",
        # structure
        "broadcast_in_dim", "reshape", "squeeze", "expand_dims", "transpose",
        "concatenate", "pad", "slice", "dynamic_slice", "dynamic_update_slice",
        "gather", "scatter-add", "scatter_add", "scatter", "convert_element_type",
        "copy", "copy_p", "iota", "rev", "split",
        # call primitives; bodies are checked recursively
        "pjit", "jit", "closed_call", "core_call", "remat", "checkpoint",
        "custom_jvp_call", "custom_vjp_call", "custom_vjp_call_jaxpr", "scan", "cond",
        # float stages of uniform/normal noise generation from a key
        "bitcast_convert_type", "nextafter",
    }
)


def _is_discrete(var) -> bool:
    dtype = getattr(var.aval, "dtype", None)
    if dtype is None:
        return True  # PRNG key types
    return not jnp.issubdtype(dtype, jnp.inexact)


def _sub_jaxprs(eqn) -> list:
    found = []
    for value in eqn.params.values():
        items = value if isinstance(value, (list, tuple)) else [value]
        for item in items:
            if isinstance(item, jcore.ClosedJaxpr):
                found.append(item.jaxpr)
            elif isinstance(item, jcore.Jaxpr):
                found.append(item)
    return found


def _equations(fn: Callable, *args):
    closed = jax.make_jaxpr(fn)(*args)
    stack = [closed.jaxpr]
    while stack:
        jaxpr = stack.pop()
        for eqn in jaxpr.eqns:
            yield eqn
            stack.extend(_sub_jaxprs(eqn))


def primitives_used(fn: Callable, *args) -> set[str]:
    """Names of every primitive traced when evaluating ``fn(*args)``."""
    return {eqn.primitive.name for eqn in _equations(fn, *args)}


def check_ops(fn: Callable, *args) -> None:
    """Raise :class:`UnsupportedOpError` if ``fn`` uses a primitive off the list."""
    for eqn in _equations(fn, *args):
        name = eqn.primitive.name
        if name in SUPPORTED_OPS or all(_is_discrete(v) for v in eqn.outvars):
            continue
        raise UnsupportedOpError(name)


def grad(fn: Callable[[Any], Any], x, check: bool = True):
    """Gradient of the scalar function ``fn`` at ``x`` (array or pytree).

    Args:
        fn: scalar-valued function of a single argument.
        x: point of evaluation.
        check: refuse functions that use primitives outside ``SUPPORTED_OPS``.

    Raises:
        UnsupportedOpError: naming the first offending primitive.
    """
    if check:
        check_ops(fn, x)
    return jax.grad(fn)(x)


def fd_check(fn: Callable, x, h: float = 1e-5, gradient=None) -> float:
    """Maximum relative error between ``grad(fn)`` and central differences.

    ``x`` may be a pytree; coordinates are taken in flattened order. The
    relative error per coordinate is ``|fd_i - g_i| / (|g_i| + 1e-12)``.
    """
    flat_x, unravel = ravel_pytree(x)
    flat_x = np.asarray(flat_x, dtype=np.float64)

    def flat_fn(v):
        return fn(unravel(v))

    x0 = jnp.asarray(flat_x)
    if gradient is None:
        check_ops(flat_fn, x0)
        g = np.asarray(jax.jit(jax.grad(flat_fn))(x0), dtype=np.float64)
    else:
        g = np.asarray(ravel_pytree(gradient)[0], dtype=np.float64)
    # All 2n perturbed points go through one compiled call; chunks bound memory.
    steps = h * np.eye(flat_x.size)
    points = jnp.asarray(np.concatenate([flat_x + steps, flat_x - steps]))
    values = np.asarray(jax.jit(lambda v: jax.lax.map(flat_fn, v, batch_size=64))(points), dtype=np.float64)
    hi, lo = values[: flat_x.size], values[flat_x.size:]
    bad = ~(np.isfinite(hi) & np.isfinite(lo))
    if bad.any():
        raise NonFiniteError(f"non-finite function value at coordinate {int(np.argmax(bad))}")
    fd = (hi - lo) / (2.0 * h)
    return float(np.max(np.abs(fd - g) / (np.abs(g) + 1e-12), initial=0.0))


def cholesky(a) -> np.ndarray:
    """Lower Cholesky factor of a symmetric positive-definite matrix."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(a).max(initial=0.0))):
        raise ValueError("matrix is not symmetric")
    if a.size == 0:
        return a.copy()
    factor, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(int(info))
    if info < 0:
        raise ValueError(f"illegal argument to dpotrf ({info})")
    return np.tril(factor)


def tag_id(tag: Hashable) -> int:
    """Stable 31-bit integer for a stream-key component."""
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0x7FFFFFFF
    return zlib.crc32(str(tag).encode("utf-8")) & 0x7FFFFFFF


def derive_key(key, *tags):
    """Fold each tag into a JAX PRNG key. Works under ``jit`` for integer tags."""
    for tag in tags:
        if isinstance(tag, (str, bytes)):
            tag = tag_id(tag)
        key = jax.random.fold_in(key, tag)
    return key


@dataclasses.dataclass(frozen=True)
class RngStream:
    """Counter-based random stream.

    Draws depend only on ``(seed, path, counter)``; streams with different
    paths are independent. ``path`` is typically ``(t, k, "purpose")``.
    """

    seed: int
    path: tuple = ()
    counter: int = 0

    def child(self, *tags) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(tags), 0)

    def advance(self, n: int = 1) -> "RngStream":
        return dataclasses.replace(self, counter=self.counter + n)

    @property
    def key(self):
        key = jax.random.PRNGKey(self.seed)
        return derive_key(key, *self.path, self.counter)

    def normal(self, shape=()) -> jax.Array:
        return jax.random.normal(self.key, shape, dtype=jnp.float64)

    def uniform(self, shape=()) -> jax.Array:
        return jax.random.uniform(self.key, shape, dtype=jnp.float64)


def as_key(rng):
    """Accept an :class:`RngStream`, a raw JAX key, or an integer seed."""
    if isinstance(rng, RngStream):
        return rng.key
    if isinstance(rng, (int, np.integer)):
        return jax.random.PRNGKey(int(rng))
    return rng


def ravel(params):
    """Flatten a parameter pytree; returns ``(vector, unravel)``."""
    return ravel_pytree(params)
