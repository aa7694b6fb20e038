"""Optimization loop, metrics, scheduling, and evaluation.

AdamW with decoupled weight decay (LayerNorm parameters and biases are
never decayed), a one-cycle cosine learning-rate schedule stepped per
batch, gradient clipping by global norm, best-validation checkpointing,
and the relative-L2 metric used both as training loss and test score.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels, precision
from ._alloc import tune_allocator
from .basis import SpectralBasis
from .datagen import Dataset
from .errors import ConfigError, ContractError, DivergenceError
from .model import PCSMModel, forward, save_checkpoint
from .tensor import (
    Tensor,
    mul,
    no_grad,
    sqrt,
    sub,
    tmean,
    tsum,
    zero_grads,
)


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    initial_lr: float
    weight_decay: float = 1e-5
    warmup_fraction: float = 0.3
    final_lr_fraction: float = 1e-4
    seed: int = 0
    precision: str = "f32"
    eval_every: int = 1
    clip_norm: float = 1.0
    val_fraction: float = 0.1

    def validate(self) -> None:
        problems = []
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.initial_lr > 0:
            problems.append(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.warmup_fraction < 1:
            problems.append(
                f"warmup_fraction must be in [0, 1), got {self.warmup_fraction}"
            )
        if not 0 <= self.final_lr_fraction <= 1:
            problems.append(
                f"final_lr_fraction must be in [0, 1], got {self.final_lr_fraction}"
            )
        if self.precision not in ("f32", "f64"):
            problems.append(f"precision must be f32 or f64, got {self.precision!r}")
        if self.eval_every < 1:
            problems.append(f"eval_every must be >= 1, got {self.eval_every}")
        if not 0 < self.val_fraction < 1:
            problems.append(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if problems:
            raise ConfigError("invalid train config: " + "; ".join(problems))


@dataclass
class TrainReport:
    train_loss: list = field(default_factory=list)
    val_rl2: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    test_rl2: float = float("nan")
    best_epoch: int = -1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


# ---------------------------------------------------------------------------
# metric


def relative_l2(pred, truth) -> Tensor:
    """Per-sample ||pred - truth|| / ||truth||, averaged over the batch.

    pred/truth: (N, d) for one sample or (B, N, d) batched. Differentiable
    in pred; truth must have nonzero norm.
    """
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    truth_arr = truth.data if isinstance(truth, Tensor) else np.asarray(
        truth, dtype=pred.data.dtype
    )
    if pred.shape != truth_arr.shape:
        raise ContractError(
            f"relative_l2 shapes differ: {pred.shape} vs {truth_arr.shape}"
        )
    axes = (-2, -1)
    den = np.sqrt(np.sum(truth_arr * truth_arr, axis=axes))
    if np.any(den == 0):
        raise ContractError("relative_l2: zero-norm truth sample")
    diff = sub(pred, Tensor(truth_arr))
    num = sqrt(tsum(mul(diff, diff), axis=axes))
    ratio = mul(num, Tensor(1.0 / den))
    if ratio.ndim == 0:
        return ratio
    return tmean(ratio)


# ---------------------------------------------------------------------------
# optimizer / schedule

_NO_DECAY_SUFFIXES = {"b", "b1", "b2", "bias", "gain"}


def excluded_from_decay(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in _NO_DECAY_SUFFIXES


class AdamW:
    """Decoupled weight decay: the decay term scales the weights directly
    and never enters the moment estimates. LayerNorm gains/biases and all
    bias vectors are excluded from decay."""

    def __init__(self, params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state = {
            p.name: (np.zeros_like(p.data), np.zeros_like(p.data))
            for p in self.params
        }

    def zero_grad(self):
        zero_grads(self.params)

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p in self.params:
            g = p.grad
            if g is None:
                continue
            m, v = self.state[p.name]
            wd = 0.0 if excluded_from_decay(p.name) else self.weight_decay
            kernels.adamw_update(
                p.tensor.data, g, m, v, lr, self.beta1, self.beta2, self.eps, wd,
                bc1, bc2,
            )


def clip_grad_norm(params, max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                np.multiply(p.grad, factor, out=p.grad)
    return norm


def one_cycle_lr(
    step: int,
    total_steps: int,
    max_lr: float,
    warmup_fraction: float = 0.3,
    final_lr_fraction: float = 1e-4,
) -> float:
    """Cosine ramp to max_lr over the warmup span, then cosine decay to
    max_lr * final_lr_fraction; continuous with the peak exactly at the
    warmup boundary."""
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    step = min(max(step, 0), total_steps)
    w = warmup_fraction * total_steps
    if step <= w and w > 0:
        return max_lr * 0.5 * (1.0 - math.cos(math.pi * step / w))
    floor = max_lr * final_lr_fraction
    span = total_steps - w
    t = (step - w) / span if span > 0 else 1.0
    return floor + (max_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# data plumbing


def _splits(dataset: Dataset, val_fraction: float):
    n_train = dataset.n_train
    n_val = max(1, int(round(val_fraction * n_train)))
    if n_val >= n_train:
        raise ContractError(
            f"validation split leaves no training data ({n_val} of {n_train})"
        )
    train_idx = np.arange(0, n_train - n_val)
    val_idx = np.arange(n_train - n_val, n_train)
    test_idx = np.arange(n_train, n_train + dataset.n_test)
    return train_idx, val_idx, test_idx


def predict(model: PCSMModel, dataset: Dataset, idx, basis) -> Tensor:
    """Forward a batch of samples; inputs are normalized by the dataset's
    train statistics and predictions are mapped back to physical units."""
    a = dataset.normalize_inputs(dataset.a[idx]).astype(precision.dtype())
    out = forward(model, a, dataset.mesh.vertices, basis)
    u_mean, u_std = dataset.stats["u_mean"], dataset.stats["u_std"]
    return Tensor(u_mean.astype(precision.dtype())) + mul(
        out, Tensor(u_std.astype(precision.dtype()))
    )


def _batch_iter(indices, batch_size):
    for lo in range(0, len(indices), batch_size):
        yield indices[lo : lo + batch_size]


# ---------------------------------------------------------------------------
# train / evaluate


def evaluate(
    model: PCSMModel,
    dataset: Dataset,
    basis: SpectralBasis | None,
    split: str = "test",
    batch_size: int = 16,
    val_fraction: float = 0.1,
) -> float:
    """Mean relative-L2 over a split ('train', 'val', 'test', or 'all')."""
    tr, va, te = _splits(dataset, val_fraction)
    idx = {
        "train": tr,
        "val": va,
        "test": te,
        "all": np.arange(dataset.n_samples),
    }[split]
    total = 0.0
    with no_grad():
        for batch in _batch_iter(idx, batch_size):
            pred = predict(model, dataset, batch, basis)
            truth = dataset.u[batch].astype(precision.dtype())
            diff = pred.data - truth
            num = np.sqrt(np.sum(diff * diff, axis=(-2, -1)))
            den = np.sqrt(np.sum(truth * truth, axis=(-2, -1)))
            if np.any(den == 0):
                raise ContractError("relative_l2: zero-norm truth sample")
            total += float(np.sum(num / den))
    return total / len(idx)


def evaluate_cross_resolution(
    model: PCSMModel,
    dataset_hi: Dataset,
    basis_hi: SpectralBasis | None,
    dataset_lo: Dataset,
    basis_lo: SpectralBasis | None,
    split: str = "test",
):
    """Same weights scored on the training resolution and on an unseen
    (coarser) resolution of the same domain."""
    err_hi = evaluate(model, dataset_hi, basis_hi, split=split)
    err_lo = evaluate(model, dataset_lo, basis_lo, split=split)
    return err_hi, err_lo


def _cast_model(model: PCSMModel, dtype):
    for p in model.parameters():
        if p.data.dtype != dtype:
            p.tensor.data = p.data.astype(dtype)


def train(
    model: PCSMModel,
    dataset: Dataset,
    basis: SpectralBasis | None,
    cfg: TrainConfig,
    log_path=None,
    checkpoint_path=None,
) -> TrainReport:
    """Mini-batch training with per-step one-cycle schedule.

    Holds out the tail of the train split for validation, checkpoints the
    best-validation weights, restores them at the end, and reports the
    final test relative-L2. Aborts with DivergenceError on a non-finite
    loss. The metrics log is newline-delimited JSON, one record per epoch.
    """
    cfg.validate()
    tune_allocator()
    with precision.precision_scope(cfg.precision):
        dt = precision.dtype()
        _cast_model(model, dt)
        train_idx, val_idx, _ = _splits(dataset, cfg.val_fraction)
        rng = np.random.default_rng(cfg.seed)
        opt = AdamW(
            model.parameters(), cfg.initial_lr, weight_decay=cfg.weight_decay
        )
        steps_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
        total_steps = cfg.epochs * steps_per_epoch
        report = TrainReport()
        best_val = float("inf")
        best_state = None
        log_file = open(log_path, "w") if log_path else None
        step = 0
        try:
            for epoch in range(cfg.epochs):
                t0 = time.perf_counter()
                order = rng.permutation(train_idx)
                loss_sum = 0.0
                lr = cfg.initial_lr
                for b, batch in enumerate(_batch_iter(order, cfg.batch_size)):
                    lr = one_cycle_lr(
                        step, total_steps, cfg.initial_lr,
                        cfg.warmup_fraction, cfg.final_lr_fraction,
                    )
                    pred = predict(model, dataset, batch, basis)
                    loss = relative_l2(pred, dataset.u[batch].astype(dt))
                    loss_val = float(loss.data)
                    if not math.isfinite(loss_val):
                        raise DivergenceError(epoch + 1, b, lr)
                    opt.zero_grad()
                    loss.backward()
                    clip_grad_norm(opt.params, cfg.clip_norm)
                    opt.step(lr=lr)
                    step += 1
                    loss_sum += loss_val * len(batch)
                train_loss = loss_sum / len(train_idx)
                if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
                    val = evaluate(model, dataset, basis, split="val",
                                   batch_size=cfg.batch_size,
                                   val_fraction=cfg.val_fraction)
                else:
                    val = report.val_rl2[-1] if report.val_rl2 else float("nan")
                seconds = time.perf_counter() - t0
                report.train_loss.append(train_loss)
                report.val_rl2.append(val)
                report.lr.append(lr)
                report.seconds.append(seconds)
                if val < best_val:
                    best_val = val
                    best_state = model.state_dict()
                    report.best_epoch = epoch + 1
                if log_file:
                    rec = {
                        "epoch": epoch + 1,
                        "train_loss": train_loss,
                        "val_rl2": val,
                        "lr": lr,
                        "seconds": seconds,
                    }
                    log_file.write(json.dumps(rec) + "\n")
                    log_file.flush()
        finally:
            if log_file:
                log_file.close()
        if best_state is not None:
            model.load_state_dict(best_state)
        report.test_rl2 = evaluate(
            model, dataset, basis, split="test", batch_size=cfg.batch_size
        )
        if checkpoint_path:
            save_checkpoint(checkpoint_path, model)
        return report
