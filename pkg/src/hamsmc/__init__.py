"""Hamiltonian sequential Monte Carlo for nonlinear Gaussian state-space models."""

import jax

jax.config.update("jax_enable_x64", True)

from hamsmc.numcore import RngStream, cholesky, fd_check, grad  # noqa: E402

__version__ = "0.1.0"

__all__ = ["RngStream", "cholesky", "fd_check", "grad", "__version__"]
