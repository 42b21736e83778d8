"""Small fully-connected networks as plain parameter pytrees."""

from __future__ import annotations

import jax
import jax.numpy as jnp

ACTIVATIONS = {
    "tanh": jnp.tanh,
    "relu": jax.nn.relu,
    "sigmoid": jax.nn.sigmoid,
    "softplus": jax.nn.softplus,
    "linear": lambda z: z,
}


def mlp_init(key, sizes, scale: float = 1.0, zero_last: bool = False):
    """Glorot-style init for layer ``sizes = [in, hidden..., out]``."""
    layers = []
    keys = jax.random.split(key, len(sizes) - 1)
    for i, (k, n_in, n_out) in enumerate(zip(keys, sizes[:-1], sizes[1:])):
        w = scale * jax.random.normal(k, (n_in, n_out), dtype=jnp.float64) / jnp.sqrt(max(n_in, 1))
        if zero_last and i == len(sizes) - 2:
            w = jnp.zeros_like(w)
        layers.append({"w": w, "b": jnp.zeros(n_out, dtype=jnp.float64)})
    return layers


def mlp_apply(layers, x, activation: str = "tanh", output: str = "linear"):
    act = ACTIVATIONS[activation]
    h = x
    for layer in layers[:-1]:
        h = act(h @ layer["w"] + layer["b"])
    last = layers[-1]
    return ACTIVATIONS[output](h @ last["w"] + last["b"])


def inv_softplus(y):
    return jnp.log(jnp.expm1(y))
