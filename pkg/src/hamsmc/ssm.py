"""State-space models ``x_t ~ f(. | x_{t-1}, u_t[, y_{t-1}])``, ``y_t ~ g(. | x_t)``.

A :class:`StateSpaceModel` is assembled from an initial-state component, a
transition component and an emission component. Each component is a frozen
dataclass holding static shape information; its parameters live in a
separate pytree so the whole model can be differentiated with JAX.

Also here: the exact Kalman-filter log-likelihood for linear-Gaussian
models, a simulator, the synthetic-data generator and the JSONL dataset
format.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, NamedTuple, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from hamsmc.dist import (
    FullCov,
    Gaussian,
    DiagCov,
    gauss_logpdf,
    poisson_logpdf,
)
from hamsmc.nets import inv_softplus, mlp_apply, mlp_init
from hamsmc.numcore import as_key


def tril_from_raw(raw):
    """Lower-triangular factor with log-parameterized diagonal."""
    return jnp.tril(raw, -1) + jnp.diag(jnp.exp(jnp.diagonal(raw)))


def raw_from_tril(tril):
    tril = jnp.asarray(tril, dtype=jnp.float64)
    return jnp.tril(tril, -1) + jnp.diag(jnp.log(jnp.diagonal(tril)))


def _raw_from_cov(cov):
    return raw_from_tril(jnp.linalg.cholesky(jnp.asarray(cov, dtype=jnp.float64)))


def _empty(n):
    return jnp.zeros((n,), dtype=jnp.float64)


# ----------------------------------------------------------------------------
# Components
# ----------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class GaussianInitial:
    """``x_1 ~ N(m0 + B0 u_1, P0)``."""

    x_dim: int
    u_dim: int = 0

    def init(self, key, mean=None, cov=None):
        mean = jnp.zeros(self.x_dim) if mean is None else jnp.asarray(mean, dtype=jnp.float64)
        cov = jnp.eye(self.x_dim) if cov is None else cov
        return {"mean": mean, "B": jnp.zeros((self.x_dim, self.u_dim)), "chol_raw": _raw_from_cov(cov)}

    def dist(self, params, u) -> Gaussian:
        return Gaussian(params["mean"] + params["B"] @ u, FullCov(tril_from_raw(params["chol_raw"])))


@dataclasses.dataclass(frozen=True)
class LinearTransition:
    """``x_t ~ N(A x_{t-1} + B u_t, Q)``."""

    x_dim: int
    u_dim: int = 0
    use_prev_obs: bool = dataclasses.field(default=False, init=False)

    def init(self, key, A=None, Q=None, B=None):
        if A is None:
            A = 0.9 * jnp.eye(self.x_dim)
        Q = 0.1 * jnp.eye(self.x_dim) if Q is None else Q
        B = jnp.zeros((self.x_dim, self.u_dim)) if B is None else B
        return {"A": jnp.asarray(A, dtype=jnp.float64), "B": jnp.asarray(B, dtype=jnp.float64),
                "chol_raw": _raw_from_cov(Q)}

    def prepare(self, params):
        return params

    def dist(self, prep, x_prev, u, y_prev) -> Gaussian:
        return Gaussian(prep["A"] @ x_prev + prep["B"] @ u, FullCov(tril_from_raw(prep["chol_raw"])))


@dataclasses.dataclass(frozen=True)
class NeuralTransition:
    """``x_t ~ N(A x_{t-1} + m(z), diag(softplus(s(z)) + min_var))`` with
    ``z = (x_{t-1}, u_t[, y_{t-1}])`` and ``m, s`` one tanh MLP."""

    x_dim: int
    u_dim: int = 0
    y_dim: int = 0
    hidden: int = 32
    use_prev_obs: bool = True
    min_var: float = 1e-4

    @property
    def in_dim(self) -> int:
        return self.x_dim + self.u_dim + (self.y_dim if self.use_prev_obs else 0)

    def init(self, key, var: float = 0.1):
        net = mlp_init(key, [self.in_dim, self.hidden, 2 * self.x_dim], zero_last=True)
        net[-1]["b"] = jnp.concatenate(
            [jnp.zeros(self.x_dim), jnp.full(self.x_dim, inv_softplus(var - self.min_var))]
        )
        return {"A": 0.9 * jnp.eye(self.x_dim), "net": net}

    def prepare(self, params):
        return params

    def dist(self, prep, x_prev, u, y_prev) -> Gaussian:
        parts = [x_prev, u] + ([y_prev] if self.use_prev_obs else [])
        out = mlp_apply(prep["net"], jnp.concatenate(parts))
        mean = prep["A"] @ x_prev + out[: self.x_dim]
        var = jax.nn.softplus(out[self.x_dim:]) + self.min_var
        return Gaussian(mean, DiagCov(var))


@dataclasses.dataclass(frozen=True)
class LinearGaussianEmission:
    """``y_t ~ N(C x_t + d, R)``."""

    x_dim: int
    y_dim: int

    def init(self, key, C=None, R=None, d=None):
        if C is None:
            C = jax.random.normal(key, (self.y_dim, self.x_dim)) / jnp.sqrt(self.x_dim)
        R = 0.1 * jnp.eye(self.y_dim) if R is None else R
        d = jnp.zeros(self.y_dim) if d is None else d
        return {"C": jnp.asarray(C, dtype=jnp.float64), "d": jnp.asarray(d, dtype=jnp.float64),
                "chol_raw": _raw_from_cov(R)}

    def dist(self, params, x) -> Gaussian:
        return Gaussian(params["C"] @ x + params["d"], FullCov(tril_from_raw(params["chol_raw"])))

    def log_prob(self, params, y, x):
        return gauss_logpdf(y, self.dist(params, x))

    def mean(self, params, x):
        return params["C"] @ x + params["d"]

    def sample(self, params, key, x):
        g = self.dist(params, x)
        return g.mean + g.cov.factor_apply(jax.random.normal(key, (self.y_dim,), dtype=jnp.float64))


@dataclasses.dataclass(frozen=True)
class DecoderGaussianEmission:
    """``y_t ~ N(decoder(x_t), diag(exp(log_var)))``.

    The decoder is a one-hidden-layer MLP. With ``output="sigmoid"`` the
    sigmoid output is multiplied by a learned per-output range.
    """

    x_dim: int
    y_dim: int
    hidden: int = 20
    activation: str = "relu"
    output: str = "sigmoid"

    def init(self, key, var: float = 0.2, scale: float = 1.0):
        return {
            "net": mlp_init(key, [self.x_dim, self.hidden, self.y_dim], scale),
            "range": jnp.ones(self.y_dim),
            "log_var": jnp.full(self.y_dim, jnp.log(var)),
        }

    def mean(self, params, x):
        out = mlp_apply(params["net"], x, self.activation, self.output)
        return params["range"] * out if self.output == "sigmoid" else out

    def dist(self, params, x) -> Gaussian:
        return Gaussian(self.mean(params, x), DiagCov(jnp.exp(params["log_var"])))

    def log_prob(self, params, y, x):
        return gauss_logpdf(y, self.dist(params, x))

    def sample(self, params, key, x):
        noise = jax.random.normal(key, (self.y_dim,), dtype=jnp.float64)
        return self.mean(params, x) + jnp.exp(0.5 * params["log_var"]) * noise


@dataclasses.dataclass(frozen=True)
class PoissonEmission:
    """Counts ``y_t ~ Poisson(softplus(decoder(x_t)))``."""

    x_dim: int
    y_dim: int
    hidden: int = 20
    activation: str = "relu"
    min_rate: float = 1e-6

    def init(self, key, scale: float = 1.0):
        return {"net": mlp_init(key, [self.x_dim, self.hidden, self.y_dim], scale)}

    def rate(self, params, x):
        return jax.nn.softplus(mlp_apply(params["net"], x, self.activation)) + self.min_rate

    def mean(self, params, x):
        return self.rate(params, x)

    def log_prob(self, params, y, x):
        return poisson_logpdf(y, self.rate(params, x))

    def sample(self, params, key, x):
        return jax.random.poisson(key, self.rate(params, x)).astype(jnp.float64)


# ----------------------------------------------------------------------------
# Model
# ----------------------------------------------------------------------------


class BoundModel:
    """A model with its parameters, transition caches prepared once."""

    def __init__(self, model: "StateSpaceModel", params):
        self.model = model
        self.params = params
        self._transition = model.transition.prepare(params["transition"])

    def initial_dist(self, u) -> Gaussian:
        return self.model.initial.dist(self.params["initial"], u)

    def transition_dist(self, x_prev, u, y_prev) -> Gaussian:
        return self.model.transition.dist(self._transition, x_prev, u, y_prev)

    def transition_logpdf(self, x, x_prev, u, y_prev):
        return gauss_logpdf(x, self.transition_dist(x_prev, u, y_prev))

    def emission_logpdf(self, y, x):
        return self.model.emission.log_prob(self.params["emission"], y, x)

    def emission_mean(self, x):
        return self.model.emission.mean(self.params["emission"], x)

    def emission_sample(self, key, x):
        return self.model.emission.sample(self.params["emission"], key, x)

    def joint_loglik(self, x, x_prev, u, y, y_prev):
        """Emission plus transition log-density of ``x`` (the potential of the flow)."""
        return self.emission_logpdf(y, x) + self.transition_logpdf(x, x_prev, u, y_prev)


@dataclasses.dataclass(frozen=True)
class StateSpaceModel:
    initial: Any
    transition: Any
    emission: Any

    @property
    def x_dim(self) -> int:
        return self.initial.x_dim

    @property
    def u_dim(self) -> int:
        return self.initial.u_dim

    @property
    def y_dim(self) -> int:
        return self.emission.y_dim

    def __post_init__(self):
        if self.transition.x_dim != self.x_dim or self.emission.x_dim != self.x_dim:
            raise ValueError("component latent dimensions disagree")

    def init(self, key):
        k1, k2, k3 = jax.random.split(key, 3)
        return {
            "initial": self.initial.init(k1),
            "transition": self.transition.init(k2),
            "emission": self.emission.init(k3),
        }

    def bind(self, params) -> BoundModel:
        return BoundModel(self, params)


def joint_loglik(model: StateSpaceModel, params, x, x_prev, u, y, y_prev):
    return model.bind(params).joint_loglik(x, x_prev, u, y, y_prev)


def linear_gaussian_model(x_dim: int, y_dim: int, u_dim: int = 0) -> StateSpaceModel:
    return StateSpaceModel(
        GaussianInitial(x_dim, u_dim), LinearTransition(x_dim, u_dim), LinearGaussianEmission(x_dim, y_dim)
    )


def neural_model(x_dim: int, y_dim: int, u_dim: int = 0, hidden: int = 32, decoder_hidden: int = 20,
                 use_prev_obs: bool = True, emission: str = "gaussian", output: str = "sigmoid"):
    """Neural transition with MLP decoder (Gaussian or Poisson emission)."""
    if emission == "gaussian":
        em = DecoderGaussianEmission(x_dim, y_dim, decoder_hidden, output=output)
    elif emission == "poisson":
        em = PoissonEmission(x_dim, y_dim, decoder_hidden)
    else:
        raise ValueError(f"unknown emission family {emission!r}")
    return StateSpaceModel(
        GaussianInitial(x_dim, u_dim), NeuralTransition(x_dim, u_dim, y_dim, hidden, use_prev_obs), em
    )


# ----------------------------------------------------------------------------
# Linear-Gaussian oracle
# ----------------------------------------------------------------------------


class KalmanError(np.linalg.LinAlgError):
    pass


class LgssmSpec(NamedTuple):
    A: Any
    C: Any
    Q: Any
    R: Any
    m0: Any
    P0: Any
    B: Any = None
    d: Any = None

    def validate(self):
        for name in ("Q", "R", "P0"):
            mat = np.asarray(getattr(self, name))
            if np.any(np.linalg.eigvalsh(0.5 * (mat + mat.T)) <= 0):
                raise ValueError(f"{name} is not positive definite")


def lgssm_spec_from_params(model: StateSpaceModel, params) -> LgssmSpec:
    init, trans, em = params["initial"], params["transition"], params["emission"]

    def cov(raw):
        L = tril_from_raw(raw)
        return L @ L.T

    return LgssmSpec(
        A=trans["A"], C=em["C"], Q=cov(trans["chol_raw"]), R=cov(em["chol_raw"]),
        m0=init["mean"], P0=cov(init["chol_raw"]), B=trans["B"], d=em["d"],
    )


class KalmanResult(NamedTuple):
    loglik: jax.Array
    step_loglik: jax.Array  # (T,) log p(y_t | y_{1:t-1})
    pred_y_mean: jax.Array  # (T, Dy) E[y_t | y_{1:t-1}]
    filtered_mean: jax.Array
    filtered_cov: jax.Array


def kalman_filter(spec: LgssmSpec, ys, us=None) -> KalmanResult:
    """Prediction-update recursion; differentiable in the model matrices."""
    ys = jnp.asarray(ys, dtype=jnp.float64)
    T, dy = ys.shape
    dx = np.shape(spec.A)[0]
    A, C, Q, R = (jnp.asarray(v, dtype=jnp.float64) for v in spec[:4])
    B = jnp.zeros((dx, 0)) if spec.B is None else jnp.asarray(spec.B, dtype=jnp.float64)
    d = jnp.zeros(dy) if spec.d is None else jnp.asarray(spec.d, dtype=jnp.float64)
    us = jnp.zeros((T, B.shape[1])) if us is None else jnp.asarray(us, dtype=jnp.float64)

    def update(m, P, y):
        y_mean = C @ m + d
        S = C @ P @ C.T + R
        L = jnp.linalg.cholesky(0.5 * (S + S.T))
        r = y - y_mean
        z = jax.scipy.linalg.solve_triangular(L, r, lower=True)
        ll = -0.5 * z @ z - jnp.sum(jnp.log(jnp.diagonal(L))) - 0.5 * dy * jnp.log(2 * jnp.pi)
        G = jax.scipy.linalg.cho_solve((L, True), C @ P).T
        m_new = m + G @ r
        P_new = P - G @ S @ G.T
        return m_new, 0.5 * (P_new + P_new.T), ll, y_mean

    def step(carry, inputs):
        m, P = carry
        y, u = inputs
        m_pred = A @ m + B @ u
        P_pred = A @ P @ A.T + Q
        m_f, P_f, ll, y_mean = update(m_pred, P_pred, y)
        return (m_f, P_f), (ll, y_mean, m_f, P_f)

    m0 = jnp.asarray(spec.m0, dtype=jnp.float64)
    P0 = jnp.asarray(spec.P0, dtype=jnp.float64)
    m1, P1, ll1, y1 = update(m0, P0, ys[0])
    _, (lls, y_means, ms, Ps) = jax.lax.scan(step, (m1, P1), (ys[1:], us[1:]))
    lls = jnp.concatenate([ll1[None], lls])
    return KalmanResult(
        jnp.sum(lls), lls, jnp.concatenate([y1[None], y_means]),
        jnp.concatenate([m1[None], ms]), jnp.concatenate([P1[None], Ps]),
    )


def kalman_loglik(spec: LgssmSpec, ys, us=None):
    """Exact ``log p(y_{1:T})``; raises :class:`KalmanError` on a non-PD innovation covariance."""
    value = kalman_filter(spec, ys, us).loglik
    if not isinstance(value, jax.core.Tracer) and not np.isfinite(float(value)):
        raise KalmanError("innovation covariance is not positive definite")
    return value


# ----------------------------------------------------------------------------
# Data
# ----------------------------------------------------------------------------


@dataclasses.dataclass
class TrajectoryBatch:
    ys: list
    us: list
    ids: list

    def __post_init__(self):
        if not (len(self.ys) == len(self.us) == len(self.ids)):
            raise ValueError("ys, us and ids must have equal length")
        for y, u, i in zip(self.ys, self.us, self.ids):
            if len(y) < 1:
                raise ValueError(f"sequence {i!r} is empty")
            if len(u) != len(y):
                raise ValueError(f"sequence {i!r}: u and y lengths differ")
        self.ys = [np.asarray(y, dtype=np.float64).reshape(len(y), -1) for y in self.ys]
        self.us = [np.asarray(u, dtype=np.float64).reshape(len(y), -1) for u, y in zip(self.us, self.ys)]

    def __len__(self):
        return len(self.ys)

    @property
    def lengths(self):
        return [len(y) for y in self.ys]

    @property
    def y_dim(self) -> int:
        return self.ys[0].shape[1]

    @property
    def u_dim(self) -> int:
        return self.us[0].shape[1]

    def subset(self, index: Sequence[int]) -> "TrajectoryBatch":
        return TrajectoryBatch([self.ys[i] for i in index], [self.us[i] for i in index],
                               [self.ids[i] for i in index])

    def stacked(self):
        """``(ys, us)`` as ``(N, T, D)`` arrays; requires equal lengths."""
        if len(set(self.lengths)) != 1:
            raise ValueError("sequences have different lengths")
        return jnp.asarray(np.stack(self.ys)), jnp.asarray(np.stack(self.us))

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, y, u in zip(self.ids, self.ys, self.us):
                fh.write(json.dumps({"id": i, "y": y.tolist(), "u": u.tolist()}) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "TrajectoryBatch":
        ys, us, ids = [], [], []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
            if not line.strip():
                continue
            rec = json.loads(line)
            y = np.asarray(rec["y"], dtype=np.float64)
            if y.ndim != 2:
                raise ValueError(f"line {n + 1}: 'y' must be a list of vectors")
            u = rec.get("u") or [[] for _ in range(len(y))]
            ys.append(y)
            us.append(np.asarray(u, dtype=np.float64).reshape(len(y), -1))
            ids.append(str(rec.get("id", n)))
        return cls(ys, us, ids)


def simulate(model: StateSpaceModel, params, rng, T: int, us=None):
    """Draw ``(xs, ys)`` of length ``T`` from the model."""
    key = as_key(rng)
    us = jnp.zeros((T, model.u_dim)) if us is None else jnp.asarray(us, dtype=jnp.float64)
    bound = model.bind(params)

    def noise(k, g):
        return g.mean + g.cov.factor_apply(jax.random.normal(k, (g.dim,), dtype=jnp.float64))

    k0, ke0, key = jax.random.split(key, 3)
    x1 = noise(k0, bound.initial_dist(us[0]))
    y1 = bound.emission_sample(ke0, x1)

    def step(carry, inputs):
        x_prev, y_prev = carry
        k, u = inputs
        kx, ky = jax.random.split(k)
        x = noise(kx, bound.transition_dist(x_prev, u, y_prev))
        y = bound.emission_sample(ky, x)
        return (x, y), (x, y)

    keys = jax.random.split(key, T - 1)
    _, (xs, ys) = jax.lax.scan(step, (x1, y1), (keys, us[1:]))
    return jnp.concatenate([x1[None], xs]), jnp.concatenate([y1[None], ys])


@dataclasses.dataclass(frozen=True)
class SyntheticConfig:
    x_dim: int = 10
    y_dim: int = 30
    length: int = 100
    num_sequences: int = 10
    noise_var: float = 0.2
    hidden: int = 20
    spectral_radius: float = 0.9
    output: str = "sigmoid"
    output_scale: float = 1.0


class SyntheticData(NamedTuple):
    batch: TrajectoryBatch
    latents: list
    model: StateSpaceModel
    params: Any


def gen_synthetic(rng, cfg: SyntheticConfig = SyntheticConfig()) -> SyntheticData:
    """``x_{t+1} = A x_t + eps``, ``y_t = g(x_t) + xi`` with a ReLU/sigmoid decoder ``g``.

    ``A`` is a Gaussian matrix rescaled to the configured spectral radius;
    both noises are isotropic with variance ``cfg.noise_var``.
    """
    key = as_key(rng)
    k_a, k_dec, k_seq = jax.random.split(key, 3)
    A = np.asarray(jax.random.normal(k_a, (cfg.x_dim, cfg.x_dim), dtype=jnp.float64))
    A = A * (cfg.spectral_radius / np.max(np.abs(np.linalg.eigvals(A))))
    model = StateSpaceModel(
        GaussianInitial(cfg.x_dim),
        LinearTransition(cfg.x_dim),
        DecoderGaussianEmission(cfg.x_dim, cfg.y_dim, cfg.hidden, "relu", cfg.output),
    )
    sd = np.sqrt(cfg.noise_var)
    noise_raw = jnp.diag(jnp.full(cfg.x_dim, np.log(sd) if sd > 0 else -np.inf))
    params = {
        "initial": model.initial.init(None),
        "transition": {"A": jnp.asarray(A), "B": jnp.zeros((cfg.x_dim, 0)), "chol_raw": noise_raw},
        "emission": model.emission.init(k_dec, var=1.0, scale=2.0),
    }
    params["emission"]["log_var"] = jnp.full(cfg.y_dim, np.log(cfg.noise_var) if cfg.noise_var > 0 else -np.inf)
    params["emission"]["range"] = jnp.full(cfg.y_dim, cfg.output_scale)
    seq_keys = jax.random.split(k_seq, cfg.num_sequences)
    sim = jax.jit(lambda k: simulate(model, params, k, cfg.length))
    xs, ys = [], []
    for k in seq_keys:
        x, y = sim(k)
        xs.append(np.asarray(x))
        ys.append(np.asarray(y))
    us = [np.zeros((cfg.length, 0)) for _ in ys]
    batch = TrajectoryBatch(ys, us, [f"seq{i:04d}" for i in range(cfg.num_sequences)])
    return SyntheticData(batch, xs, model, params)
