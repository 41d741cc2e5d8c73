import numpy as np
import pytest

from blur import autograd as ag
from blur.data import bidir_task
from blur.errors import ConfigError, DimensionError, NumericError
from blur.network import ModelConfig, init_model, named_parameters
from blur.training import (
    AdamW, PAPER_ETTH1_H24, Split, TaskData, TrainConfig, cross_entropy, decays, evaluate, loss_mae, loss_mse,
    max_eigen_radius, optimizer_step, predict, step_lr, train,
)


class TestLosses:
    @pytest.mark.parametrize("fn", [loss_mse, loss_mae])
    def test_examples(self, fn):
        y = np.array([0.0, 0.0])
        assert fn(y, y) == 0.0
        assert fn(y, np.array([1.0, -1.0])) == 1.0

    def test_against_loops(self):
        rng = np.random.default_rng(0)
        y, yhat = rng.normal(size=(4, 5, 3)), rng.normal(size=(4, 5, 3))
        sq = ab = 0.0
        for a, b in zip(y.ravel(), yhat.ravel()):
            sq += (a - b) ** 2
            ab += abs(a - b)
        assert abs(loss_mse(y, yhat) - sq / y.size) <= 1e-12
        assert abs(loss_mae(y, yhat) - ab / y.size) <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            loss_mse(np.zeros(3), np.zeros(4))

    def test_cross_entropy(self):
        logits = np.log(np.array([[0.2, 0.8], [0.5, 0.5]]))
        assert abs(cross_entropy(np.array([1, 0]), logits) - (-np.log(0.8) - np.log(0.5)) / 2) <= 1e-12

    def test_tensor_in_tensor_out(self):
        assert isinstance(loss_mse(np.zeros(2), ag.Tensor(np.ones(2))), ag.Tensor)


class TestSchedule:
    def test_values(self):
        cfg = TrainConfig()
        assert step_lr(0, cfg) == 0.001
        assert abs(step_lr(1, cfg) - 0.0007) <= 1e-18
        assert step_lr(1000, cfg) == 1e-7

    @pytest.mark.parametrize("kw", [dict(min_lr=1e-2), dict(lr_decay=0.0), dict(lr_decay=1.5), dict(batch_size=0),
                                    dict(dropout=1.0)])
    def test_config_rejects(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.batch_size, cfg.epochs, cfg.dropout, cfg.weight_decay) == (64, 8, 0.1, 0.05)


class TestOptimizer:
    def test_zero_gradient_no_decay(self):
        p = {"w": np.array([1.5, -2.0])}
        optimizer_step(p, {"w": np.zeros(2)}, lr=0.1, weight_decay=0.0)
        assert np.array_equal(p["w"], [1.5, -2.0])

    def test_decoupled_decay(self):
        p = {"w": np.array([1.5, -2.0])}
        optimizer_step(p, {"w": np.zeros(2)}, lr=0.1, weight_decay=0.05)
        assert np.allclose(p["w"], np.array([1.5, -2.0]) * (1 - 0.1 * 0.05), rtol=0, atol=1e-15)

    def test_quadratic_bowl(self):
        x = np.array([1.0])
        state = None
        for _ in range(200):
            state = optimizer_step({"x": x}, {"x": 2 * x}, lr=0.05, weight_decay=0.0, state=state)
        assert abs(x[0]) < 1e-3

    def test_no_decay_group(self):
        for name in ("blocks.0.fwd.nu_log", "blocks.1.bwd.theta", "blocks.0.fwd.gamma", "blocks.2.norm.scale"):
            assert not decays(name)
        assert decays("blocks.0.mlp.W_a") and decays("head.W") and decays("blocks.0.fwd.B.re")

    def test_clipping(self):
        p = {"a": np.zeros(1), "b": np.zeros(1)}
        opt = AdamW(p, max_grad_norm=1.0)
        opt.step({"a": np.array([30.0]), "b": np.array([40.0])}, lr=0.0)
        assert np.allclose(opt.m["a"] / (1 - opt.beta1), 0.6) and np.allclose(opt.m["b"] / (1 - opt.beta1), 0.8)

    def test_missing_gradient_is_zero_and_nonfinite_rejected(self):
        p = {"a": np.ones(1), "b": np.ones(1)}
        opt = AdamW(p)
        opt.step({"a": np.ones(1)}, lr=0.1)
        assert p["b"][0] == 1.0
        with pytest.raises(NumericError):
            opt.step({"a": np.array([np.nan])}, lr=0.1)


def _regression_data(seed=0, n=96, N=12):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, N, 2))
    y = np.cumsum(x[..., :1], axis=1) * 0.3
    parts = [Split(x[i:j], y[i:j]) for i, j in ((0, 64), (64, 80), (80, 96))]
    return TaskData(*parts)


def _small_model(seed=0, **kw):
    return init_model(ModelConfig(d_input=2, d_model=4, d_hidden=8, d_output=1, n_layers=1, seed=seed, **kw))


class TestTrain:
    def test_report_and_improvement(self):
        model = _small_model()
        data = _regression_data()
        before = evaluate(model, data.val)["mse"]
        rep = train(model, data, TrainConfig(epochs=4, batch_size=16, base_lr=1e-2))
        assert rep.epochs == 4 == len(rep.val) == len(rep.test) == len(rep.lr) == len(rep.seconds)
        assert rep.lr == [step_lr(e, TrainConfig(base_lr=1e-2)) for e in range(4)]
        assert min(v["mse"] for v in rep.val) < before
        assert all(r < 1.0 for r in rep.max_radius)
        # the model holds the best-validation parameters
        assert evaluate(model, data.val)["mse"] == rep.val[rep.best_epoch]["mse"]
        assert rep.final_test == rep.test[rep.best_epoch]

    def test_bit_identical_traces(self):
        cfg = TrainConfig(epochs=2, batch_size=16, base_lr=1e-2, seed=3)
        a = train(_small_model(), _regression_data(), cfg)
        b = train(_small_model(), _regression_data(), cfg)
        assert a.train_loss == b.train_loss and a.val == b.val

    def test_eval_concurrency_invariant(self):
        model = _small_model()
        x = _regression_data().train.inputs
        assert np.array_equal(predict(model, x, batch_size=8, workers=1), predict(model, x, batch_size=8, workers=4))

    def test_classification(self):
        data = bidir_task(16, 64, 32, 32, seed=0)
        model = init_model(ModelConfig(d_input=2, d_model=4, d_hidden=8, d_output=3, n_layers=1, task="labeling"))
        rep = train(model, data, TrainConfig(epochs=2, batch_size=16, base_lr=1e-2, dropout=0.0))
        assert 0.0 <= rep.final_test["accuracy"] <= 1.0 and "loss" in rep.final_test

    def test_empty_split(self):
        data = _regression_data()
        data.val = Split(data.val.inputs[:0], data.val.targets[:0])
        with pytest.raises(ConfigError, match="val"):
            train(_small_model(), data, TrainConfig(epochs=1))

    def test_radius_guard(self):
        model = _small_model()
        model.blocks[0].fwd.nu_log[0] = -60.0  # rounds to |lambda| = 1 in double precision
        assert max_eigen_radius(model) >= 1.0
        with pytest.raises(NumericError, match="radius"):
            train(model, _regression_data(), TrainConfig(epochs=1, base_lr=1e-12, min_lr=1e-12, weight_decay=0.0))

    def test_reference_constant(self):
        assert PAPER_ETTH1_H24 == {"mse": 0.151, "mae": 0.300}

    def test_checkpoint_written(self, tmp_path):
        path = tmp_path / "m.ckpt"
        train(_small_model(), _regression_data(), TrainConfig(epochs=1, batch_size=32), checkpoint_path=path)
        assert path.read_bytes().startswith(b"BLURCKPT")
