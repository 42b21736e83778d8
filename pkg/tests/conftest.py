import gc

import jax
import jax.numpy as jnp
import numpy as np
import pytest

import hamsmc  # noqa: F401  (enables float64)
from hamsmc.ssm import linear_gaussian_model, simulate


def random_lgssm(key, x_dim=2, y_dim=3):
    """LGSSM with random stable dynamics and random PD covariances."""
    model = linear_gaussian_model(x_dim, y_dim)
    ka, kc, kq, kr, km = jax.random.split(key, 5)
    A = jax.random.normal(ka, (x_dim, x_dim)) / np.sqrt(x_dim)
    A = 0.8 * A / jnp.max(jnp.abs(jnp.linalg.eigvals(A)))
    Lq = jnp.tril(0.2 * jax.random.normal(kq, (x_dim, x_dim)), -1) + 0.5 * jnp.eye(x_dim)
    Lr = jnp.tril(0.2 * jax.random.normal(kr, (y_dim, y_dim)), -1) + 0.6 * jnp.eye(y_dim)
    params = {
        "initial": model.initial.init(None, mean=0.3 * jax.random.normal(km, (x_dim,))),
        "transition": model.transition.init(None, A=jnp.real(A), Q=Lq @ Lq.T),
        "emission": model.emission.init(kc, R=Lr @ Lr.T),
    }
    return model, params


@pytest.fixture
def lgssm():
    model, params = random_lgssm(jax.random.PRNGKey(11))
    _, ys = simulate(model, params, 5, 25)
    return model, params, ys


@pytest.fixture(autouse=True, scope="module")
def _release_compiled_programs():
    """Drop JAX's compilation caches after each module to keep the full run within memory."""
    yield
    jax.clear_caches()
    gc.collect()
