"""Losses, learning-rate schedule, optimizer and the training loop."""
from __future__ import annotations

import copy
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor, backward
from .errors import ConfigError, DimensionError, NumericError
from .lru import eigenvalues
from .network import BlurModelParams, forward_tape, named_parameters, state_dict, update_running_stats

log = logging.getLogger(__name__)

# published reference for ETTh1, horizon 24 (context only, never asserted)
PAPER_ETTH1_H24 = {"mse": 0.151, "mae": 0.300}

NO_DECAY_MARKERS = (".nu_log", ".theta", ".gamma", ".norm.")


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 8
    base_lr: float = 1e-3
    min_lr: float = 1e-7
    lr_decay: float = 0.7
    dropout: float = 0.1
    weight_decay: float = 0.05
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    max_grad_norm: Optional[float] = None
    eval_batch_size: int = 256
    eval_workers: int = 1

    def __post_init__(self):
        if not 0.0 < self.min_lr <= self.base_lr:
            raise ConfigError(f"need 0 < min_lr <= base_lr, got {self.min_lr}, {self.base_lr}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    max_radius: list = field(default_factory=list)
    best_epoch: int = -1
    final_test: dict = field(default_factory=dict)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def rows(self):
        """Metric rows ``(epoch, split, mse, mae, lr, seconds)``."""
        for e in range(self.epochs):
            for split, metrics in (("val", self.val[e]), ("test", self.test[e])):
                yield {
                    "epoch": e,
                    "split": split,
                    "mse": metrics.get("mse", float("nan")),
                    "mae": metrics.get("mae", float("nan")),
                    "lr": self.lr[e],
                    "seconds": self.seconds[e],
                    "train_loss": self.train_loss[e],
                }


# -- losses ----------------------------------------------------------------------


def _check_same_shape(y, yhat):
    ys = y.shape if isinstance(y, Tensor) else np.shape(y)
    hs = yhat.shape if isinstance(yhat, Tensor) else np.shape(yhat)
    if tuple(ys) != tuple(hs):
        raise DimensionError(f"targets {tuple(ys)} and predictions {tuple(hs)} differ in shape")


def _scalar_or_tensor(out: Tensor, *inputs):
    return out if any(isinstance(t, Tensor) for t in inputs) else float(out.data)


def loss_mse(y, yhat):
    """Mean squared error over all elements; a Tensor if any input is one."""
    _check_same_shape(y, yhat)
    d = ag.sub(yhat, y)
    return _scalar_or_tensor(ag.mean(d * d), y, yhat)


def loss_mae(y, yhat):
    _check_same_shape(y, yhat)
    return _scalar_or_tensor(ag.mean(ag.absolute(ag.sub(yhat, y))), y, yhat)


def cross_entropy(labels, logits):
    """Mean softmax cross-entropy; ``labels`` are integer class ids."""
    labels = np.asarray(labels)
    return _scalar_or_tensor(-ag.mean(ag.pick(ag.log_softmax(logits), labels)), logits)


# -- schedule and optimizer ------------------------------------------------------


def step_lr(epoch: int, cfg: TrainConfig) -> float:
    return max(cfg.min_lr, cfg.base_lr * cfg.lr_decay**epoch)


def decays(name: str) -> bool:
    return not any(marker in name for marker in NO_DECAY_MARKERS)


class AdamW:
    """Adaptive-moment updates with decoupled weight decay, applied in place."""

    def __init__(self, params: dict, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: Optional[float] = None):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict, lr: float):
        self.t += 1
        grads = {k: grads.get(k, np.zeros_like(p)) for k, p in self.params.items()}
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name!r}")
        if self.max_grad_norm is not None:
            total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.max_grad_norm:
                grads = {k: g * (self.max_grad_norm / total) for k, g in grads.items()}
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay and decays(name):
                p *= 1.0 - lr * self.weight_decay
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(p)):
                raise NumericError(f"update produced non-finite values in {name!r}")


def optimizer_step(params: dict, grads: dict, lr: float, weight_decay: float, state: Optional[AdamW] = None) -> AdamW:
    """One in-place update; pass the returned optimizer back in to keep its moments."""
    opt = state or AdamW(params, weight_decay=weight_decay)
    opt.weight_decay = weight_decay
    opt.step(grads, lr)
    return opt


# -- data containers -------------------------------------------------------------


@dataclass
class Split:
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return self.inputs.shape[0]


@dataclass
class TaskData:
    train: Split
    val: Split
    test: Split
    kind: str = "regression"


# -- loop ------------------------------------------------------------------------


def _loss(model, out, targets):
    if model.task == "regression":
        return loss_mse(Tensor(targets), out)
    return cross_entropy(targets, out)


def predict(model: BlurModelParams, inputs: np.ndarray, batch_size: int = 256, workers: int = 1) -> np.ndarray:
    """Eval-mode predictions; batches may run concurrently without changing the result."""
    chunks = [inputs[i:i + batch_size] for i in range(0, len(inputs), batch_size)]
    run = lambda x: forward_tape(model, x, train=False)[0].data
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]
    return np.concatenate(outs, axis=0)


def evaluate(model: BlurModelParams, split: Split, batch_size: int = 256, workers: int = 1) -> dict:
    pred = predict(model, split.inputs, batch_size, workers)
    if model.task == "regression":
        return {"mse": loss_mse(split.targets, pred), "mae": loss_mae(split.targets, pred)}
    labels = np.asarray(split.targets)
    return {"accuracy": float(np.mean(np.argmax(pred, axis=-1) == labels)),
            "loss": cross_entropy(labels, pred)}


def max_eigen_radius(model: BlurModelParams) -> float:
    radii = [np.abs(eigenvalues(lru)).max() for b in model.blocks for lru in (b.fwd, b.bwd) if lru is not None]
    return float(max(radii))


def train(model: BlurModelParams, data: TaskData, cfg: TrainConfig, checkpoint_path=None, extras=None) -> TrainReport:
    """Train in place; on return the model holds the best-validation parameters."""
    for name in ("train", "val", "test"):
        if len(getattr(data, name)) == 0:
            raise ConfigError(f"the {name} split is empty")
    for block in model.blocks:
        block.dropout_rate = cfg.dropout
    rng = np.random.default_rng(cfg.seed)
    params = named_parameters(model)
    opt = AdamW(params, weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps,
                max_grad_norm=cfg.max_grad_norm)
    report = TrainReport()
    best_key, best_state = None, None
    n_train = len(data.train)

    for epoch in range(cfg.epochs):
        start = time.perf_counter()
        lr = step_lr(epoch, cfg)
        order = rng.permutation(n_train)
        total, seen = 0.0, 0
        for lo in range(0, n_train, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            stats = {}
            with Tape() as tape:
                out, _ = forward_tape(model, data.train.inputs[idx], train=True, rng=rng, track=True, stats=stats)
                loss = _loss(model, out, data.train.targets[idx])
            grads = backward(tape, loss)
            opt.step(grads, lr)
            update_running_stats(model, stats)
            total += float(loss.data) * len(idx)
            seen += len(idx)
        radius = max_eigen_radius(model)
        if radius >= 1.0:
            raise NumericError(f"eigenvalue radius reached {radius} at epoch {epoch}")
        val = evaluate(model, data.val, cfg.eval_batch_size, cfg.eval_workers)
        test = evaluate(model, data.test, cfg.eval_batch_size, cfg.eval_workers)
        report.train_loss.append(total / seen)
        report.val.append(val)
        report.test.append(test)
        report.lr.append(lr)
        report.max_radius.append(radius)
        report.seconds.append(time.perf_counter() - start)
        key = val["mse"] if model.task == "regression" else -val["accuracy"]
        log.info("epoch %d lr %.2e train %.5f val %s test %s", epoch, lr, total / seen, val, test)
        if best_key is None or key < best_key:
            best_key, best_state = key, copy.deepcopy(state_dict(model))
            report.best_epoch = epoch

    if best_state is not None:
        for name, arr in state_dict(model).items():
            arr[...] = best_state[name]
    report.final_test = evaluate(model, data.test, cfg.eval_batch_size, cfg.eval_workers)
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(model, checkpoint_path, extras=extras)
    return report
