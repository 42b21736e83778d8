import json

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from hamsmc.harness import (
    ConfigError,
    Dims,
    ExperimentConfig,
    adam_ascent,
    adam_init,
    clip_by_global_norm,
    build_model,
    decode_tree,
    encode_tree,
    evaluate,
    fit_lgssm_exact,
    gradient_check,
    init_params,
    load_checkpoint,
    predictive_rmse,
    save_checkpoint,
    split_dataset,
    train,
    write_eval,
)
from hamsmc.ssm import SyntheticConfig, TrajectoryBatch, gen_synthetic, kalman_filter, lgssm_spec_from_params


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    data = gen_synthetic(0, SyntheticConfig(x_dim=2, y_dim=3, length=12, num_sequences=6, noise_var=0.1))
    path = tmp_path_factory.mktemp("data") / "synthetic.jsonl"
    data.batch.to_jsonl(path)
    return path, data


def tiny_config(dataset_path, out_dir, **overrides):
    base = dict(
        dataset=str(dataset_path), out_dir=str(out_dir), model="nn-gssm", inference="hsmc", num_particles=3,
        n_steps=2, step_size=0.1, steps=4, batch_size=2, x_dim=2, hidden=3, decoder_hidden=3, metric_hidden=3,
        eval_every=2, checkpoint_every=2, eval_runs=1, learning_rate=0.01,
    )
    base.update(overrides)
    return ExperimentConfig.from_dict(base)


class TestConfig:
    def test_unknown_key(self, dataset):
        with pytest.raises(ConfigError, match="colour"):
            ExperimentConfig.from_dict({"dataset": str(dataset[0]), "out_dir": "x", "colour": 1})

    def test_missing_dataset(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            ExperimentConfig.from_dict({"dataset": str(tmp_path / "none.jsonl"), "out_dir": "x"})

    @pytest.mark.parametrize(
        "overrides",
        [dict(model="hmm"), dict(inference="vi"), dict(n_steps=10, step_size=0.1), dict(heldout_fraction=1.0),
         dict(metric="diag"), dict(num_particles=0), dict(grad_clip=0.0)],
    )
    def test_invalid_values(self, dataset, overrides):
        with pytest.raises(ConfigError):
            tiny_config(dataset[0], "x", **overrides)

    def test_json_roundtrip(self, dataset, tmp_path):
        cfg = tiny_config(dataset[0], tmp_path / "run")
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(cfg.to_dict()))
        assert ExperimentConfig.from_json(path) == cfg

    def test_smc_config_uses_zero_steps(self, dataset):
        assert tiny_config(dataset[0], "x", inference="smc").hsmc.n_steps == 0


class TestPieces:
    def test_split_dataset(self, dataset):
        batch = dataset[1].batch
        train_set, held = split_dataset(batch, 0.2)
        assert len(train_set) == 4 and held.ids == batch.ids[4:]
        assert split_dataset(batch, 0.0)[1] is None

    def test_tree_roundtrip(self):
        tree = {"a": jnp.arange(6.0).reshape(2, 3), "b": [{"w": jnp.ones(2)}], "c": None}
        back = decode_tree(json.loads(json.dumps(encode_tree(tree))))
        np.testing.assert_array_equal(back["a"], tree["a"])
        assert back["c"] is None and back["b"][0]["w"].shape == (2,)

    def test_adam_first_step_moves_by_learning_rate(self):
        params = {"w": jnp.array([1.0, -2.0])}
        grads = {"w": jnp.array([3.0, -0.5])}
        new, state = adam_ascent(params, grads, adam_init(params), 0.1)
        np.testing.assert_allclose(new["w"], [1.1, -2.1], atol=1e-8)
        assert int(state.count) == 1

    def test_adam_ascends_a_quadratic(self):
        params = jnp.array([3.0])
        state = adam_init(params)
        for _ in range(300):
            g = jax.grad(lambda x: -jnp.sum((x - 1.0) ** 2))(params)
            params, state = adam_ascent(params, g, state, 0.05)
        assert abs(float(params[0]) - 1.0) < 1e-2

    def test_clip_by_global_norm(self):
        grads = {"a": jnp.array([3.0, 0.0]), "b": [jnp.array([4.0])]}
        clipped = clip_by_global_norm(grads, 1.0)
        np.testing.assert_allclose(clipped["a"], [0.6, 0.0])
        np.testing.assert_allclose(clipped["b"][0], [0.8])
        same = clip_by_global_norm(grads, jnp.inf)
        assert all(np.array_equal(x, y) for x, y in zip(jax.tree_util.tree_leaves(same), jax.tree_util.tree_leaves(grads)))

    def test_init_params_are_strongly_typed(self, dataset):
        cfg = tiny_config(dataset[0], "x", model="gpssm", x_dim=1, num_inducing=3)
        model, field = build_model(cfg, Dims(1, 3, 0))
        params, phi = init_params(cfg, model, field)
        assert not any(getattr(a, "weak_type", False) for a in jax.tree_util.tree_leaves((params, phi)))

    def test_checkpoint_roundtrip(self, dataset, tmp_path):
        cfg = tiny_config(dataset[0], tmp_path)
        dims = Dims(2, 3, 0)
        model, field = build_model(cfg, dims)
        params, phi = init_params(cfg, model, field)
        path = tmp_path / "ck.json"
        save_checkpoint(path, cfg, 7, dims, params, phi)
        ck = load_checkpoint(path)
        assert ck.step == 7 and ck.config == cfg and ck.dims == dims
        for a, b in zip(jax.tree_util.tree_leaves(params), jax.tree_util.tree_leaves(ck.params)):
            np.testing.assert_array_equal(a, b)

    def test_checkpoint_version_mismatch(self, dataset, tmp_path):
        cfg = tiny_config(dataset[0], tmp_path)
        dims = Dims(2, 3, 0)
        model, field = build_model(cfg, dims)
        path = tmp_path / "ck.json"
        save_checkpoint(path, cfg, 0, dims, *init_params(cfg, model, field))
        data = json.loads(path.read_text())
        data["format_version"] = 99
        path.write_text(json.dumps(data))
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(path)


class TestTrain:
    def test_outputs_and_reproducibility(self, dataset, tmp_path):
        results = []
        for run in ("a", "b"):
            cfg = tiny_config(dataset[0], tmp_path / run)
            results.append(train(cfg, record_wall_clock=False))
        a, b = tmp_path / "a", tmp_path / "b"
        assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
        names = sorted(p.name for p in (a / "checkpoints").iterdir())
        assert names == ["step_000000.json", "step_000002.json", "step_000004.json"]
        for n in names:
            ca, cb = (json.loads((d / "checkpoints" / n).read_text()) for d in (a, b))
            assert ca["config"].pop("out_dir") != cb["config"].pop("out_dir")
            assert ca == cb
        header = (a / "metrics.csv").read_text().splitlines()[0]
        assert header == "step,train_elbo,heldout_ll_per_step,ess_mean,integrator_fallbacks,wall_clock"
        assert [h["step"] for h in results[0].history] == [0, 2, 4]
        assert json.loads((a / "config.json").read_text())["steps"] == 4

    def test_refuses_to_overwrite_metrics(self, dataset, tmp_path):
        cfg = tiny_config(dataset[0], tmp_path / "run", steps=0, inference="smc")
        train(cfg)
        with pytest.raises(FileExistsError):
            train(cfg)

    def test_evaluate_grid(self, dataset, tmp_path):
        cfg = tiny_config(dataset[0], tmp_path / "run", steps=0)
        res = train(cfg)
        ck = load_checkpoint(res.checkpoints[-1])
        batch = dataset[1].batch.subset([0, 1])
        rows = evaluate(ck, batch, Ks=(2, 3), Ss=(1, 2), num_runs=2)
        assert len(rows) == 8
        smc = {(r.K, r.S): r.elbo_per_step for r in rows if r.method == "smc"}
        assert smc[(2, 1)] == smc[(2, 2)]
        payload = write_eval(rows, tmp_path / "eval")
        assert set(payload["table"]) == {"smc", "hsmc"}
        assert set(payload["table"]["hsmc"]["K=3"]) == {"S=1", "S=2"}
        assert (tmp_path / "eval" / "eval.csv").read_text().splitlines()[0] == "K,S,method,elbo_per_step,se_per_step"

    def test_evaluate_rejects_mismatched_dataset(self, dataset, tmp_path):
        cfg = tiny_config(dataset[0], tmp_path / "run", steps=0, inference="smc")
        ck = load_checkpoint(train(cfg).checkpoints[-1])
        other = TrajectoryBatch([np.zeros((5, 4))], [np.zeros((5, 0))], ["x"])
        with pytest.raises(ValueError, match="y_dim"):
            evaluate(ck, other, Ks=(2,), Ss=(1,), num_runs=2)


class TestBaseline:
    def test_exact_fit_improves_likelihood_and_rmse_uses_kalman(self, dataset):
        batch = dataset[1].batch
        model, params, ll0 = fit_lgssm_exact(batch, 2, steps=0)
        model, params, ll = fit_lgssm_exact(batch, 2, steps=150, learning_rate=0.05)
        assert ll > ll0
        y = batch.ys[0]
        pred = np.asarray(kalman_filter(lgssm_spec_from_params(model, params), y).pred_y_mean)[1:]
        single = TrajectoryBatch([y], [batch.us[0]], ["s"])
        assert predictive_rmse(model, params, single) == pytest.approx(np.sqrt(np.mean((pred - y[1:]) ** 2)))


class TestGradientCheck:
    @pytest.mark.parametrize("family", ["lgssm", "nn-gssm", "gpssm"])
    def test_pathwise_gradient_matches_finite_differences(self, family):
        out = gradient_check(family, seed=0)
        assert out["num_params"] < 50
        assert out["max_rel_error"] < 1e-4
