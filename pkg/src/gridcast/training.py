"""Minibatch training over sample windows.

The loss is the station-masked mean squared error on normalized values, plus
L2 regularization over weight tensors and, when configured, the weighted
neighbor-smoothing penalty. All randomness (shuffling, dropout) derives from
the config seed, so identical configs give identical loss curves.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NonFiniteError, TrainingAborted
from .models import spatiotemporal_loss
from .pipeline import SampleWindow
from .seeding import sub_rng
from .tensor import Tape, Tensor


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    steps: int = 200
    l2_beta: float = 0.01
    dropout: float = 0.5
    optimizer: str = "adam"
    seed: int = 0
    debug_checks: bool = False

    def __post_init__(self):
        if self.learning_rate < 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError("learning rate, batch size and steps must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.l2_beta < 0:
            raise ConfigError("l2_beta must be nonnegative")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {"learning_rate": self.learning_rate, "batch_size": self.batch_size,
                "steps": self.steps, "l2_beta": self.l2_beta, "dropout": self.dropout,
                "optimizer": self.optimizer, "seed": self.seed,
                "debug_checks": self.debug_checks}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Sgd:
    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for _, p in self.params:
            if p.grad is not None:
                p.data -= (self.lr * p.grad).astype(p.dtype)


class Adam:
    """Adam with bias correction; a zero gradient on zero moments moves nothing."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data, dtype=np.float64) for name, p in self.params}
        self.t = 0

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / b1t
            v_hat = self.v[name] / b2t
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)


def make_optimizer(name: str, params, lr: float):
    return Sgd(params, lr) if name == "sgd" else Adam(params, lr)


def weight_params(named: Sequence[tuple[str, Tensor]]) -> list[tuple[str, Tensor]]:
    """Weight tensors (kernels, matrices, peepholes); biases are not regularized."""
    return [(n, p) for n, p in named if ".b" not in n]


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean squared error over the cells the mask marks, on normalized values."""
    if mask.shape != pred.shape:
        if mask.shape == pred.shape[1:]:
            mask = np.broadcast_to(mask, pred.shape)
        else:
            raise ContractError(f"mask shape {mask.shape} does not fit prediction {pred.shape}")
    count = float(mask.sum())
    if count == 0:
        raise ContractError("mask selects no cells")
    diff = pred - T.tensor(target.astype(pred.data.dtype))
    masked = T.hadamard(T.hadamard(diff, diff), T.tensor(mask.astype(pred.data.dtype)))
    return T.scale(T.sum_all(masked), 1.0 / count)


def _first_nonfinite(named: Sequence[tuple[str, Tensor]]) -> Optional[str]:
    for name, p in named:
        if not np.isfinite(p.data).all():
            return name
        if p.grad is not None and not np.isfinite(p.grad).all():
            return f"{name}.grad"
    return None


@dataclass
class TrainResult:
    loss_curve: list[float] = field(default_factory=list)
    pretrain_curve: list[float] = field(default_factory=list)
    steps: int = 0
    wall_clock_sec: float = 0.0


def save_loss_curve(path, curve: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, value in enumerate(curve):
            writer.writerow([i, f"{value:.8f}"])


def _pretrain_autoencoder(model, windows, cfg: TrainConfig, result: TrainResult) -> None:
    """Reconstruction passes over per-cell features before fine-tuning."""
    rng = sub_rng(cfg.seed, "pretrain.shuffle")
    ae_params = [(n, p) for n, p in model.named_parameters() if n.startswith("ae_")]
    opt = make_optimizer(cfg.optimizer, ae_params, cfg.learning_rate)
    epochs = model.cfg.ae_epochs
    for epoch in range(epochs):
        idx = int(rng.integers(0, len(windows)))
        feats = model.features_from_window(windows[idx].inputs)
        tape = Tape()
        with tape:
            loss = model.reconstruction_loss(feats)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingAborted(f"pretrain epoch {epoch}: non-finite reconstruction loss")
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
        result.pretrain_curve.append(value)
    model.mark_pretrained()


def train(model, windows: Sequence[SampleWindow], cfg: TrainConfig,
          pretrain: bool = True) -> TrainResult:
    """Run ``cfg.steps`` minibatch updates; returns the loss curve.

    The model's dropout rate and L2 weight follow this config for the run.
    A non-finite loss aborts with the step index and the first offending
    tensor's name.
    """
    if not windows:
        raise ContractError("no training windows")
    result = TrainResult()
    started = time.perf_counter()

    model.cfg.dropout = cfg.dropout
    if model.cfg.arch == "dal":
        if pretrain and not model.pretrained:
            _pretrain_autoencoder(model, windows, cfg, result)
        model.require_pretrained()

    named = model.named_parameters()
    weights = weight_params(named)
    opt = make_optimizer(cfg.optimizer, named, cfg.learning_rate)
    shuffle_rng = sub_rng(cfg.seed, "train.shuffle")
    dropout_rng = sub_rng(cfg.seed, "train.dropout")

    for step in range(cfg.steps):
        size = min(cfg.batch_size, len(windows))
        batch = shuffle_rng.choice(len(windows), size=size, replace=False)
        tape = Tape()
        with tape:
            total: Optional[Tensor] = None
            for idx in batch:
                w = windows[int(idx)]
                pred = model.forward(w.inputs, train=cfg.dropout > 0, rng=dropout_rng)
                loss_w = masked_mse(pred, w.target, w.target_mask)
                if model.cfg.use_st_loss:
                    penalty = spatiotemporal_loss(pred)
                    loss_w = loss_w + T.scale(penalty, model.cfg.st_loss_weight)
                total = loss_w if total is None else total + loss_w
            loss = T.scale(total, 1.0 / size)

        data_loss = loss.item()
        l2_penalty = cfg.l2_beta * sum(float((p.data.astype(np.float64) ** 2).sum())
                                       for _, p in weights)
        if not np.isfinite(data_loss):
            culprit = _first_nonfinite(named) or "loss"
            raise TrainingAborted(f"step {step}: non-finite loss (tensor {culprit})")

        opt.zero_grad()
        tape.backward(loss)
        if cfg.l2_beta > 0:
            for _, p in weights:
                reg = (2.0 * cfg.l2_beta) * p.data
                p.grad = reg.astype(p.dtype) if p.grad is None else p.grad + reg.astype(p.dtype)
        opt.step()
        if cfg.debug_checks:
            culprit = _first_nonfinite(named)
            if culprit is not None:
                raise NonFiniteError(f"step {step}: non-finite values in tensor {culprit}")
        result.loss_curve.append(data_loss + l2_penalty)

    result.steps = cfg.steps
    result.wall_clock_sec = time.perf_counter() - started
    return result
