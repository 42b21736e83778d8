"""Experiment configuration, training loop, checkpoints and evaluation.

A run is fully described by an :class:`ExperimentConfig` (one JSON file).
``train`` maximizes the per-step ELBO with Adam, appending one row per
evaluation to ``metrics.csv`` and writing JSON checkpoints. ``evaluate``
fills a ``K x S`` grid of per-step ELBO estimates for bootstrap SMC and
HSMC from a checkpoint.
"""

from __future__ import annotations

import csv
import dataclasses
import functools
import json
import logging
import time
from pathlib import Path
from typing import Any, NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from hamsmc.gpssm import SparseGPTransition, elbo_gpssm, gp_kl, gpssm_model
from hamsmc.hamilton import VARIANTS
from hamsmc.hsmc import HsmcConfig, _hsmc, batch_objective, elbo_hsmc
from hamsmc.metric import MetricField
from hamsmc.numcore import as_key, derive_key
from hamsmc.smc import ElboEstimate, elbo_smc, one_step_predict
from hamsmc.ssm import (
    LinearGaussianEmission,
    LinearTransition,
    StateSpaceModel,
    TrajectoryBatch,
    kalman_filter,
    lgssm_spec_from_params,
    linear_gaussian_model,
    neural_model,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MODEL_FAMILIES = ("lgssm", "nn-gssm", "gpssm")
INFERENCE = ("smc", "hsmc")
METRICS_COLUMNS = ("step", "train_elbo", "heldout_ll_per_step", "ess_mean", "integrator_fallbacks", "wall_clock")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, step: int, block: str):
        super().__init__(f"non-finite gradient at step {step} in parameter block {block!r}")
        self.step = step
        self.block = block


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    out_dir: str
    model: str = "nn-gssm"
    inference: str = "hsmc"
    num_particles: int = 10
    n_steps: int = 5
    step_size: float = 0.05
    variant: str = "generalized-implicit"
    scheme: str = "multinomial"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # Rescale the gradient to this global norm when it is larger; None disables.
    grad_clip: float | None = None
    steps: int = 100
    batch_size: int = 4
    seed: int = 0
    x_dim: int = 2
    hidden: int = 32
    decoder_hidden: int = 20
    emission: str = "gaussian"
    decoder_output: str = "linear"
    use_prev_obs: bool = False
    num_inducing: int = 16
    metric: str = "learned"
    metric_rank: int = 1
    metric_hidden: int = 32
    metric_init_scale: float = 0.1
    heldout_fraction: float = 0.2
    eval_every: int = 50
    eval_runs: int = 2
    checkpoint_every: int = 100

    def __post_init__(self):
        problems = []
        if self.model not in MODEL_FAMILIES:
            problems.append(f"model must be one of {MODEL_FAMILIES}")
        if self.inference not in INFERENCE:
            problems.append(f"inference must be one of {INFERENCE}")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if self.metric not in ("learned", "identity"):
            problems.append("metric must be 'learned' or 'identity'")
        if self.num_particles < 1:
            problems.append("num_particles must be >= 1")
        if self.n_steps < 0:
            problems.append("n_steps must be >= 0")
        if self.inference == "hsmc" and self.n_steps * self.step_size >= 1:
            problems.append("n_steps * step_size must be < 1")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1 or self.checkpoint_every < 1:
            problems.append("steps >= 0, batch_size >= 1, eval_every >= 1, checkpoint_every >= 1 required")
        if not 0.0 <= self.heldout_fraction < 1.0:
            problems.append("heldout_fraction must be in [0, 1)")
        if self.grad_clip is not None and not self.grad_clip > 0:
            problems.append("grad_clip must be positive or null")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, data: dict, check_paths: bool = True) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        if check_paths and not Path(cfg.dataset).is_file():
            raise ConfigError(f"dataset not found: {cfg.dataset}")
        return cfg

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hsmc(self) -> HsmcConfig:
        """Filter configuration used for training (S = 0 for bootstrap SMC)."""
        S = self.n_steps if self.inference == "hsmc" else 0
        return HsmcConfig(self.num_particles, S, self.step_size, self.variant, scheme=self.scheme)


# ----------------------------------------------------------------------------
# Models
# ----------------------------------------------------------------------------


class Dims(NamedTuple):
    x_dim: int
    y_dim: int
    u_dim: int


def build_model(cfg: ExperimentConfig, dims: Dims) -> tuple[StateSpaceModel, MetricField | None]:
    if cfg.model == "lgssm":
        model = linear_gaussian_model(dims.x_dim, dims.y_dim, dims.u_dim)
    elif cfg.model == "nn-gssm":
        model = neural_model(dims.x_dim, dims.y_dim, dims.u_dim, cfg.hidden, cfg.decoder_hidden,
                             cfg.use_prev_obs, cfg.emission, cfg.decoder_output)
    else:
        model = gpssm_model(dims.x_dim, dims.y_dim, dims.u_dim, cfg.num_inducing, "decoder",
                            cfg.decoder_hidden, cfg.use_prev_obs)
    field = None
    if cfg.inference == "hsmc" and cfg.metric == "learned":
        field = MetricField(dims.x_dim, rank=cfg.metric_rank, hidden=cfg.metric_hidden)
    return model, field


def init_params(cfg: ExperimentConfig, model: StateSpaceModel, field):
    key = jax.random.PRNGKey(cfg.seed)
    params = model.init(derive_key(key, "model"))
    phi = None if field is None else field.init(derive_key(key, "metric"), cfg.metric_init_scale)
    return strong_tree(params), strong_tree(phi)


def strong_tree(tree):
    """Drop weak types so the jitted train step compiles once, not per dtype promotion."""
    return jax.tree_util.tree_map(lambda a: jnp.array(a, dtype=jnp.result_type(a)), tree)


# ----------------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------------


def encode_tree(tree):
    """JSON-ready copy of a pytree of arrays (dicts, lists, None, arrays)."""
    if tree is None:
        return None
    if isinstance(tree, dict):
        return {k: encode_tree(v) for k, v in tree.items()}
    if isinstance(tree, (list, tuple)):
        return [encode_tree(v) for v in tree]
    a = np.asarray(tree, dtype=np.float64)
    return {"__array__": a.ravel().tolist(), "shape": list(a.shape)}


def decode_tree(data):
    if data is None:
        return None
    if isinstance(data, dict) and "__array__" in data:
        return jnp.asarray(np.asarray(data["__array__"], dtype=np.float64).reshape(data["shape"]))
    if isinstance(data, dict):
        return {k: decode_tree(v) for k, v in data.items()}
    if isinstance(data, list):
        return [decode_tree(v) for v in data]
    raise ValueError(f"cannot decode {type(data).__name__}")


class Checkpoint(NamedTuple):
    config: ExperimentConfig
    step: int
    dims: Dims
    model: StateSpaceModel
    field: MetricField | None
    params: Any
    phi: Any


def save_checkpoint(path, cfg: ExperimentConfig, step: int, dims: Dims, params, phi) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "step": step,
        "config": cfg.to_dict(),
        "dims": dims._asdict(),
        "params": encode_tree(params),
        "phi": encode_tree(phi),
    }
    path = Path(path)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    version = data.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    cfg = ExperimentConfig.from_dict(data["config"], check_paths=False)
    dims = Dims(**data["dims"])
    model, field = build_model(cfg, dims)
    return Checkpoint(cfg, int(data["step"]), dims, model, field, decode_tree(data["params"]),
                      decode_tree(data["phi"]))


# ----------------------------------------------------------------------------
# Optimizer
# ----------------------------------------------------------------------------


class AdamState(NamedTuple):
    m: Any
    v: Any
    count: jax.Array


def adam_init(params) -> AdamState:
    zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
    return AdamState(zeros, zeros, jnp.zeros((), jnp.int32))


def adam_ascent(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam step that *increases* the objective."""
    count = state.count + 1
    m = jax.tree_util.tree_map(lambda m, g: beta1 * m + (1 - beta1) * g, state.m, grads)
    v = jax.tree_util.tree_map(lambda v, g: beta2 * v + (1 - beta2) * g * g, state.v, grads)
    c1 = 1 - beta1 ** count
    c2 = 1 - beta2 ** count
    new = jax.tree_util.tree_map(lambda p, m, v: p + lr * (m / c1) / (jnp.sqrt(v / c2) + eps), params, m, v)
    return new, AdamState(m, v, count)


def clip_by_global_norm(grads, max_norm):
    """Scale ``grads`` down so their joint L2 norm is at most ``max_norm``.

    Pathwise gradients through strongly expanding latent maps occasionally
    spike by several orders of magnitude; one such step is enough to wreck
    Adam's moment estimates.
    """
    leaves = jax.tree_util.tree_leaves(grads)
    norm = jnp.sqrt(sum(jnp.sum(g * g) for g in leaves)) if leaves else jnp.zeros(())
    scale = jnp.minimum(1.0, max_norm / jnp.maximum(norm, 1e-300))
    return jax.tree_util.tree_map(lambda g: g * scale, grads)


# ----------------------------------------------------------------------------
# Training
# ----------------------------------------------------------------------------


def split_dataset(batch: TrajectoryBatch, fraction: float):
    """Last ``ceil(fraction * N)`` sequences are held out (none if fraction is 0)."""
    n = len(batch)
    n_out = int(np.ceil(fraction * n)) if fraction > 0 else 0
    if n_out >= n:
        n_out = n - 1
    return batch.subset(range(n - n_out)), (batch.subset(range(n - n_out, n)) if n_out else None)


def per_step_objective(model, field, hcfg, params, phi, ys, us, keys):
    """Batch-mean ELBO divided by sequence length (GP models subtract the KL)."""
    value = batch_objective(model, field, hcfg, params, phi, ys, us, keys)
    if isinstance(model.transition, SparseGPTransition):
        value = value - gp_kl(model.transition, params["transition"])
    return value / ys.shape[1]


@functools.partial(jax.jit, static_argnames=("model", "field", "hcfg", "betas"))
def _train_step(model, field, hcfg, betas, params, phi, opt, ys, us, keys, lr, clip):
    theta = {"model": params, "metric": phi}

    def objective(th):
        return per_step_objective(model, field, hcfg, th["model"], th["metric"], ys, us, keys)

    value, grads = jax.value_and_grad(objective)(theta)
    finite = {
        name: jnp.all(jnp.array([jnp.all(jnp.isfinite(g)) for g in jax.tree_util.tree_leaves(sub)] or [True]))
        for name, sub in (list(grads["model"].items()) + [("metric", grads["metric"])])
    }
    grads = clip_by_global_norm(grads, clip)
    new, opt = adam_ascent(theta, grads, opt, lr, betas[0], betas[1], betas[2])
    return value, new["model"], new["metric"], opt, finite


@functools.partial(jax.jit, static_argnames=("model", "field", "hcfg"))
def _diagnostics(model, field, hcfg, params, phi, ys, us, keys):
    res = jax.vmap(lambda y, u, k: _hsmc(model, params, field, phi, y, u, k, hcfg))(ys, us, keys)
    return res.log_z, jnp.mean(res.ess), jnp.sum(res.fallbacks)


def heldout_diagnostics(model, field, hcfg, params, phi, batch: TrajectoryBatch, key, runs: int):
    """Per-step held-out log-likelihood estimate, mean ESS and fallback count."""
    total_ll, ess_sum, ess_n, fallbacks = 0.0, 0.0, 0, 0
    by_len: dict[int, list[int]] = {}
    for i, n in enumerate(batch.lengths):
        by_len.setdefault(n, []).append(i)
    for r in range(runs):
        for idx in by_len.values():
            sub = batch.subset(idx)
            ys, us = sub.stacked()
            keys = jax.vmap(lambda i: derive_key(key, r, i))(jnp.asarray(idx))
            log_z, ess_mean, fb = _diagnostics(model, field, hcfg, params, phi, ys, us, keys)
            total_ll += float(jnp.sum(log_z))
            ess_sum += float(ess_mean) * len(idx)
            ess_n += len(idx)
            fallbacks += int(fb)
    ll = total_ll / runs / float(np.sum(batch.lengths))
    return ll, ess_sum / ess_n, fallbacks


class TrainResult(NamedTuple):
    params: Any
    phi: Any
    history: list
    checkpoints: list


def _open_metrics(path: Path):
    if path.exists() and path.stat().st_size > 0:
        raise FileExistsError(f"{path} already exists; use a fresh output directory")
    fh = open(path, "w", newline="", encoding="utf-8")
    writer = csv.writer(fh)
    writer.writerow(METRICS_COLUMNS)
    fh.flush()
    return fh, writer


def _length_buckets(batch: TrajectoryBatch) -> list[list[int]]:
    """Sequence indices grouped by length (stacking needs equal lengths)."""
    by_len: dict[int, list[int]] = {}
    for i, n in enumerate(batch.lengths):
        by_len.setdefault(n, []).append(i)
    return sorted(by_len.values(), key=lambda b: b[0])


def _draw_minibatch(batch: TrajectoryBatch, buckets, chooser: np.random.Generator, size: int):
    sizes = np.array([len(b) for b in buckets], dtype=np.float64)
    bucket = buckets[chooser.choice(len(buckets), p=sizes / sizes.sum())]
    idx = chooser.choice(bucket, size=min(size, len(bucket)), replace=False)
    return batch.subset([int(i) for i in idx]).stacked()


def train(cfg: ExperimentConfig, record_wall_clock: bool = True) -> TrainResult:
    """Stochastic-gradient ascent on the per-step ELBO.

    Writes ``metrics.csv`` (one row per evaluation, flushed immediately)
    and ``checkpoints/step_XXXXXX.json`` under ``cfg.out_dir``.

    Raises:
        TrainingError: on a non-finite gradient, naming the step and block.
    """
    data = TrajectoryBatch.from_jsonl(cfg.dataset)
    dims = Dims(cfg.x_dim, data.y_dim, data.u_dim)
    train_set, heldout = split_dataset(data, cfg.heldout_fraction)
    eval_set = heldout if heldout is not None else train_set
    model, field = build_model(cfg, dims)
    params, phi = init_params(cfg, model, field)
    hcfg = cfg.hsmc
    out = Path(cfg.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    buckets = _length_buckets(train_set)
    chooser = np.random.default_rng(cfg.seed)
    base = jax.random.PRNGKey(cfg.seed)
    eval_key = derive_key(base, "heldout")
    betas = (cfg.beta1, cfg.beta2, cfg.adam_eps)
    opt = adam_init({"model": params, "metric": phi})
    history, checkpoints = [], []
    start = time.perf_counter()
    fh, writer = _open_metrics(out / "metrics.csv")
    last_value = float("nan")
    try:
        for step in range(cfg.steps + 1):
            if step % cfg.eval_every == 0 or step == cfg.steps:
                ll, ess_mean, fb = heldout_diagnostics(model, field, hcfg, params, phi, eval_set, eval_key,
                                                       cfg.eval_runs)
                row = (step, last_value, ll, ess_mean, fb, time.perf_counter() - start if record_wall_clock else 0.0)
                writer.writerow([row[0]] + [repr(float(v)) for v in row[1:4]] + [row[4], f"{row[5]:.3f}"])
                fh.flush()
                history.append(dict(zip(METRICS_COLUMNS, row)))
                log.info("step %d elbo/step %.4f heldout ll/step %.4f", step, last_value, ll)
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                path = out / "checkpoints" / f"step_{step:06d}.json"
                save_checkpoint(path, cfg, step, dims, params, phi)
                checkpoints.append(str(path))
            if step == cfg.steps:
                break
            ys, us = _draw_minibatch(train_set, buckets, chooser, cfg.batch_size)
            keys = jax.vmap(lambda i: derive_key(base, step, "train", i))(jnp.arange(ys.shape[0]))
            value, new_params, new_phi, opt, finite = _train_step(
                model, field, hcfg, betas, params, phi, opt, ys, us, keys, cfg.learning_rate,
                jnp.inf if cfg.grad_clip is None else cfg.grad_clip,
            )
            for name, ok in finite.items():
                if not bool(ok):
                    raise TrainingError(step, name)
            params, phi = new_params, new_phi
            last_value = float(value)
    finally:
        fh.close()
    return TrainResult(params, phi, history, checkpoints)


# ----------------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------------


# ----------------------------------------------------------------------------
# Linear-Gaussian baseline and predictive accuracy
# ----------------------------------------------------------------------------


def _kalman_loglik(model, params, ys, us):
    return kalman_filter(lgssm_spec_from_params(model, params), ys, us).loglik


@functools.partial(jax.jit, static_argnames=("model", "betas"))
def _lgssm_step(model, betas, params, opt, ys, us, lr):
    def objective(p):
        return jnp.mean(jax.vmap(lambda y, u: _kalman_loglik(model, p, y, u))(ys, us)) / ys.shape[1]

    value, grads = jax.value_and_grad(objective)(params)
    params, opt = adam_ascent(params, grads, opt, lr, *betas)
    return value, params, opt


def fit_lgssm_exact(batch: TrajectoryBatch, x_dim: int, steps: int = 1000, learning_rate: float = 0.01,
                    batch_size: int = 4, seed: int = 0):
    """Fit a linear-Gaussian SSM by Adam on the exact Kalman log-likelihood.

    Minibatches are drawn like :func:`train` draws them (per length bucket).

    Returns:
        ``(model, params, per_step_loglik)`` with the final full-data
        log-likelihood per time step.
    """
    dims = Dims(x_dim, batch.y_dim, batch.u_dim)
    model = linear_gaussian_model(dims.x_dim, dims.y_dim, dims.u_dim)
    params = strong_tree(model.init(derive_key(jax.random.PRNGKey(seed), "model")))
    opt = adam_init(params)
    buckets = _length_buckets(batch)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        ys, us = _draw_minibatch(batch, buckets, rng, batch_size)
        _, params, opt = _lgssm_step(model, (0.9, 0.999, 1e-8), params, opt, ys, us, learning_rate)
    lls = [float(_kalman_loglik(model, params, jnp.asarray(y), jnp.asarray(u))) for y, u in zip(batch.ys, batch.us)]
    return model, params, sum(lls) / sum(len(y) for y in batch.ys)


def predictive_rmse(model: StateSpaceModel, params, batch: TrajectoryBatch, num_particles: int = 200,
                    rng=0) -> float:
    """Root-mean-square error of ``E[y_t | y_{1:t-1}]`` over ``t >= 2`` and all sequences.

    Linear-Gaussian models use the exact Kalman predictive mean; other
    models use a bootstrap particle filter with ``num_particles`` particles.
    """
    sq, n = 0.0, 0
    for i, (y, u) in enumerate(zip(batch.ys, batch.us)):
        y = np.asarray(y)
        if isinstance(model.transition, LinearTransition) and isinstance(model.emission, LinearGaussianEmission):
            pred = np.asarray(kalman_filter(lgssm_spec_from_params(model, params), y, u).pred_y_mean)[1:]
        else:
            pred = np.asarray(one_step_predict(model, params, y, u, derive_key(as_key(rng), i), num_particles))
        sq += float(np.sum((pred - y[1:]) ** 2))
        n += pred.size
    return float(np.sqrt(sq / n))


class EvalRow(NamedTuple):
    K: int
    S: int
    method: str
    elbo_per_step: float
    se_per_step: float


def _elbo(ckpt: Checkpoint, batch, K, S, method, rng, runs) -> ElboEstimate:
    cfg = ckpt.config
    gp = isinstance(ckpt.model.transition, SparseGPTransition)
    if method == "smc":
        hcfg = HsmcConfig(K, 0, cfg.step_size, cfg.variant, scheme=cfg.scheme)
        if gp:
            return elbo_gpssm(ckpt.model, ckpt.params, None, None, batch, hcfg, rng, runs)
        return elbo_smc(ckpt.model, ckpt.params, batch, K, rng, runs, cfg.scheme)
    hcfg = HsmcConfig(K, S, cfg.step_size, cfg.variant, scheme=cfg.scheme)
    if gp:
        return elbo_gpssm(ckpt.model, ckpt.params, ckpt.field, ckpt.phi, batch, hcfg, rng, runs)
    return elbo_hsmc(ckpt.model, ckpt.params, ckpt.field, ckpt.phi, batch, hcfg, rng, runs)


def evaluate(ckpt: Checkpoint, batch: TrajectoryBatch, Ks=(5, 10), Ss=(5, 10), num_runs: int = 10,
             seed: int = 0) -> list[EvalRow]:
    """Per-step ELBO over the ``K x S`` grid for SMC and HSMC.

    Every cell uses the same seed, so comparisons across cells are paired.
    The SMC value does not depend on ``S`` and is computed once per ``K``.

    Raises:
        ValueError: if the dataset dimensions disagree with the checkpoint.
    """
    if batch.y_dim != ckpt.dims.y_dim or batch.u_dim != ckpt.dims.u_dim:
        raise ValueError(
            f"dataset has y_dim={batch.y_dim}, u_dim={batch.u_dim}; checkpoint expects "
            f"y_dim={ckpt.dims.y_dim}, u_dim={ckpt.dims.u_dim}"
        )
    if num_runs < 2:
        raise ValueError("need at least two runs for a standard error")
    mean_len = float(np.mean(batch.lengths))
    rows = []
    for K in Ks:
        smc = _elbo(ckpt, batch, K, 0, "smc", seed, num_runs)
        for S in Ss:
            hs = _elbo(ckpt, batch, K, S, "hsmc", seed, num_runs)
            rows.append(EvalRow(K, S, "smc", smc.per_step, smc.se / mean_len))
            rows.append(EvalRow(K, S, "hsmc", hs.per_step, hs.se / mean_len))
    return rows


def write_eval(rows: list[EvalRow], out_dir, meta: dict | None = None) -> dict:
    """Write ``eval.json`` (grid table) and ``eval.csv``; returns the JSON payload."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    Ks = sorted({r.K for r in rows})
    Ss = sorted({r.S for r in rows})
    table = {
        method: {
            f"K={K}": {f"S={S}": next(
                {"elbo_per_step": r.elbo_per_step, "se": r.se_per_step}
                for r in rows if r.K == K and r.S == S and r.method == method
            ) for S in Ss}
            for K in Ks
        }
        for method in ("smc", "hsmc")
    }
    payload = {"grid": {"K": Ks, "S": Ss}, "table": table, **(meta or {})}
    (out / "eval.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "eval.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EvalRow._fields)
        for r in rows:
            writer.writerow([r.K, r.S, r.method, repr(r.elbo_per_step), repr(r.se_per_step)])
    return payload


# ----------------------------------------------------------------------------
# Gradient check
# ----------------------------------------------------------------------------


def tiny_model(family: str):
    """A small model of the given family (under 50 parameters including the metric)."""
    if family == "lgssm":
        model = linear_gaussian_model(2, 2)
    elif family == "nn-gssm":
        model = neural_model(2, 2, hidden=1, decoder_hidden=1, use_prev_obs=False, output="linear")
    elif family == "gpssm":
        model = gpssm_model(1, 2, num_inducing=3, decoder_hidden=1)
    else:
        raise ValueError(f"unknown model family {family!r}")
    return model, MetricField(model.x_dim, rank=1, hidden=1)


def gradient_check(family: str = "nn-gssm", seed: int = 0, n_steps: int = 3, step_size: float = 0.1,
                   num_particles: int = 4, length: int = 10, h: float = 1e-5) -> dict:
    """Compare the pathwise HSMC gradient with central differences of ``log Z``.

    All random draws are frozen by reusing one filter key, so ``log Z`` is a
    deterministic function of ``(theta, phi)``. Parameters are jittered away
    from their structured initial values first so no gradient entry is zero
    by construction.
    """
    from hamsmc.hsmc import grad_elbo_hsmc
    from hamsmc.numcore import fd_check
    from hamsmc.ssm import simulate

    model, field = tiny_model(family)
    key = jax.random.PRNGKey(seed)
    params = model.init(derive_key(key, "model"))
    leaves, treedef = jax.tree_util.tree_flatten(params)
    noise_keys = jax.random.split(derive_key(key, "jitter"), len(leaves))
    leaves = [a + 0.1 * jax.random.normal(k, a.shape, dtype=jnp.float64) for a, k in zip(leaves, noise_keys)]
    params = jax.tree_util.tree_unflatten(treedef, leaves)
    phi = field.init(derive_key(key, "metric"), 0.5)
    _, ys = simulate(model, params, derive_key(key, "data"), length)
    us = jnp.zeros((length, model.u_dim))
    cfg = HsmcConfig(num_particles, n_steps, step_size)
    filter_key = derive_key(key, "filter")
    g = grad_elbo_hsmc(model, params, field, phi, ys, us, filter_key, cfg)

    def log_z(theta):
        return _hsmc(model, theta[0], field, theta[1], ys, us, filter_key, cfg).log_z

    err = fd_check(log_z, (params, phi), h, gradient=(g.grad_params, g.grad_phi))
    n = sum(np.size(a) for a in jax.tree_util.tree_leaves((params, phi)))
    return {"model": family, "num_params": int(n), "log_z": float(g.log_z), "max_rel_error": float(err)}
