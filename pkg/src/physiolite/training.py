"""Losses, optimiser, schedule and the desk-scale trainer / distiller."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace

import numpy as np

from .exceptions import ConfigError, TrainingError
from .metrics import evaluate, sigmoid, softmax
from .model import Model, ModelConfig, build_model
from .pipeline import float_inputs
from .signal_io import LabeledDataset

log = logging.getLogger(__name__)

SOFT_F1_EPS = 1e-7
VAL_FRACTION = 0.2


@dataclass(frozen=True)
class TrainConfig:
    alpha_kd: float = 0.3
    temperature: float = 2.0
    lr_max: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 30
    warmup_epochs: int = 5
    batch_size: int = 16
    seed: int = 0
    f1_reg_weight: float = 0.1
    loss_kind: str | None = None  # ce, bce or ce+softf1; None picks from the task
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    n_threads: int = 1

    def __post_init__(self):
        if not 0 <= self.alpha_kd <= 1:
            raise ConfigError(f"alpha_kd must be in [0, 1], got {self.alpha_kd}")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigError("need epochs >= 1 and 0 <= warmup_epochs <= epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.f1_reg_weight < 0:
            raise ConfigError("f1_reg_weight must be >= 0")
        if self.loss_kind not in (None, "ce", "bce", "ce+softf1"):
            raise ConfigError(f"unknown loss_kind {self.loss_kind!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# losses; each returns (mean loss over the batch, gradient w.r.t. its input)


def _log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits, target):
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    target = np.atleast_1d(np.asarray(target))
    n = z.shape[0]
    logp = _log_softmax(z)
    loss = -logp[np.arange(n), target].mean()
    grad = np.exp(logp)
    grad[np.arange(n), target] -= 1.0
    grad /= n
    return float(loss), grad.reshape(np.shape(logits))


def bce_with_logits(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if z.shape != y.shape:
        raise ConfigError(f"logits {z.shape} and labels {y.shape} differ in shape")
    # max(z, 0) - z*y + log(1 + exp(-|z|))
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return float(per.mean()), (sigmoid(z) - y) / z.size


def soft_macro_f1_loss(probs, labels, eps: float = SOFT_F1_EPS):
    """``1 - mean_c (2 sum p*y + eps) / (sum p + sum y + eps)`` over the batch."""
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels, dtype=np.float64))
    tp = (p * y).sum(axis=0)
    denom = p.sum(axis=0) + y.sum(axis=0) + eps
    numer = 2 * tp + eps
    n_classes = p.shape[1]
    loss = 1.0 - float(np.mean(numer / denom))
    grad = -(2 * y * denom - numer) / denom ** 2 / n_classes
    return loss, grad.reshape(np.shape(probs))


def kd_loss(student_logits, teacher_logits, temperature: float, task_kind: str = "single-label"):
    """``T**2`` times the KL divergence from softened teacher to student.

    Single-label uses softmax over classes; multi-label uses per-class
    sigmoids with binary KL summed over classes.  Averaged over the batch.
    """
    if not temperature > 0:
        raise ConfigError("temperature must be positive")
    zs = np.atleast_2d(np.asarray(student_logits, dtype=np.float64))
    zt = np.atleast_2d(np.asarray(teacher_logits, dtype=np.float64))
    if zs.shape != zt.shape:
        raise ConfigError("student and teacher logits differ in shape")
    T, n = temperature, zs.shape[0]
    if task_kind == "single-label":
        log_ps, log_pt = _log_softmax(zs / T), _log_softmax(zt / T)
        pt = np.exp(log_pt)
        kl = (pt * (log_pt - log_ps)).sum(axis=1)
        grad = T * (np.exp(log_ps) - pt) / n
    else:
        ps, pt = sigmoid(zs / T), sigmoid(zt / T)
        # log sigma(x) = -softplus(-x)
        def log_sig(x):
            return -(np.maximum(-x, 0) + np.log1p(np.exp(-np.abs(x))))
        a, b = zt / T, zs / T
        kl = (pt * (log_sig(a) - log_sig(b)) + (1 - pt) * (log_sig(-a) - log_sig(-b))).sum(axis=1)
        grad = T * (ps - pt) / n
    loss = T * T * float(np.maximum(kl, 0.0).mean())
    return loss, grad.reshape(np.shape(student_logits))


def combined_loss(hard, kd, alpha_kd: float):
    """Convex combination; works on losses and on gradients alike."""
    if not 0 <= alpha_kd <= 1:
        raise ConfigError(f"alpha_kd must be in [0, 1], got {alpha_kd}")
    return (1 - alpha_kd) * hard + alpha_kd * kd


# ---------------------------------------------------------------------------
# optimisation


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Linear warmup to ``lr_max`` then cosine decay, per epoch."""
    W, E = config.warmup_epochs, config.epochs
    if epoch < W:
        return config.lr_max * (epoch + 1) / W
    return config.lr_max * 0.5 * (1 + math.cos(math.pi * (epoch - W) / (E - W)))


def init_adamw_state(params: dict) -> dict:
    return {"t": 0,
            "m": {k: np.zeros_like(v) for k, v in params.items()},
            "v": {k: np.zeros_like(v) for k, v in params.items()}}


def adamw_step(params: dict, grads: dict, state: dict, lr: float, weight_decay: float,
               betas=(0.9, 0.999), eps: float = 1e-8) -> dict:
    """One decoupled-weight-decay Adam update, in place on ``params``."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, theta in params.items():
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * theta
        theta -= (lr * update).astype(theta.dtype)
    return state


# ---------------------------------------------------------------------------
# training loop


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_acc: float
    val_macro_f1: float
    val_auroc: float
    lr: float

    def to_line(self) -> str:
        return f"{self.epoch} {self.loss!r} {self.val_acc!r} {self.val_macro_f1!r} {self.val_auroc!r} {self.lr!r}"


def format_history(history) -> str:
    return "".join(r.to_line() + "\n" for r in history)


def parse_history(text: str) -> list[EpochRecord]:
    out = []
    for line in text.splitlines():
        if line.strip():
            e, *rest = line.split()
            out.append(EpochRecord(int(e), *map(float, rest)))
    return out


def split_indices(n: int, seed: int, val_fraction: float = VAL_FRACTION):
    """Seeded 80/20 shuffle split -> (train_idx, val_idx)."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _resolve_loss_kind(cfg: TrainConfig, task_kind: str) -> str:
    kind = cfg.loss_kind or ("ce" if task_kind == "single-label" else "bce")
    if task_kind == "multi-label" and kind == "ce":
        raise ConfigError("cross-entropy needs single-label targets; use bce for multi-label")
    if task_kind == "single-label" and kind == "bce":
        raise ConfigError("bce needs multi-label targets")
    return kind


def hard_loss(logits, labels, task_kind: str, loss_kind: str, f1_reg_weight: float):
    if task_kind == "single-label":
        loss, grad = cross_entropy(logits, labels)
        if loss_kind == "ce+softf1" and f1_reg_weight > 0:
            p = softmax(logits)
            f1, gp = soft_macro_f1_loss(p, np.eye(logits.shape[1])[labels])
            loss += f1_reg_weight * f1
            grad = grad + f1_reg_weight * p * (gp - (p * gp).sum(axis=1, keepdims=True))
    else:
        loss, grad = bce_with_logits(logits, labels)
        if loss_kind == "ce+softf1" and f1_reg_weight > 0:
            p = sigmoid(logits)
            f1, gp = soft_macro_f1_loss(p, labels)
            loss += f1_reg_weight * f1
            grad = grad + f1_reg_weight * gp * p * (1 - p)
    return loss, grad


def _thread_count(cfg: TrainConfig) -> int:
    cap = os.environ.get("PHYSIOLITE_THREADS")
    n = cfg.n_threads
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def _forward_backward(model: Model, xb, loss_fn, n_threads: int):
    """Forward, loss on the full batch, backward.

    With several threads the batch is split into contiguous chunks and the
    chunk gradients are summed in chunk order, so results do not depend on
    scheduling.
    """
    if n_threads <= 1 or len(xb) < 2:
        logits, cache = model.forward(xb, keep_cache=True)
        loss, g = loss_fn(logits)
        return loss, model.backward(g.astype(model.dtype), cache)
    chunks = np.array_split(np.arange(len(xb)), min(n_threads, len(xb)))
    with ThreadPoolExecutor(len(chunks)) as pool:
        outs = list(pool.map(lambda idx: model.forward(xb[idx], keep_cache=True), chunks))
        logits = np.concatenate([o[0] for o in outs])
        loss, g = loss_fn(logits)
        g = g.astype(model.dtype)
        parts = list(pool.map(lambda ic: model.backward(g[ic[0]], ic[1][1]), zip(chunks, outs)))
    grads = {}
    for name in parts[0]:
        acc = parts[0][name].copy()
        for part in parts[1:]:
            acc += part[name]
        grads[name] = acc
    return loss, grads


def predict_logits(model: Model, inputs, batch: int = 64) -> np.ndarray:
    return np.concatenate([model.forward(inputs[i:i + batch]) for i in range(0, len(inputs), batch)])


def fit_inputs(student: Model, X, y, task_kind: str, cfg: TrainConfig,
               teacher: Model | None = None, X_teacher=None):
    """Train a copy of ``student`` on precomputed float model inputs.

    ``X_teacher`` holds the teacher's own inputs when it differs in
    configuration (e.g. no positional channels); defaults to ``X``.
    Returns ``(model, history)``.
    """
    scfg = student.config
    if len(X) < 2:
        raise ConfigError("need at least two windows to train")
    if teacher is not None and teacher.config.n_classes != scfg.n_classes:
        raise ConfigError(f"teacher predicts {teacher.config.n_classes} classes, student {scfg.n_classes}")

    loss_kind = _resolve_loss_kind(cfg, task_kind)
    X = np.asarray(X, dtype=student.dtype)
    Xt = X if X_teacher is None else np.asarray(X_teacher, dtype=teacher.dtype)
    y = np.asarray(y)
    train_idx, val_idx = split_indices(len(X), cfg.seed)
    if len(val_idx) == 0:
        val_idx = train_idx
    rng = np.random.default_rng(cfg.seed + 1)
    model = student.copy()
    state = init_adamw_state(model.params)
    n_threads = _thread_count(cfg)
    history = []
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        order = rng.permutation(train_idx)
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            yb = y[idx]
            zt = teacher.forward(Xt[idx]) if teacher is not None else None

            def loss_fn(logits):
                loss, grad = hard_loss(logits, yb, task_kind, loss_kind, cfg.f1_reg_weight)
                if zt is not None:
                    kl, kgrad = kd_loss(logits, zt, cfg.temperature, task_kind)
                    loss = combined_loss(loss, kl, cfg.alpha_kd)
                    grad = combined_loss(grad, kgrad, cfg.alpha_kd)
                return loss, grad

            loss, grads = _forward_backward(model, X[idx], loss_fn, n_threads)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch starting {start}")
            adamw_step(model.params, grads, state, lr, cfg.weight_decay, cfg.betas, cfg.eps)
            total += loss * len(idx)
            seen += len(idx)
        m = evaluate(predict_logits(model, X[val_idx]), y[val_idx], task_kind)
        history.append(EpochRecord(epoch, total / seen, m.accuracy, m.macro_f1, m.auroc, lr))
        log.info("epoch %d loss %.4f val_f1 %.3f", epoch, total / seen, m.macro_f1)
    return model, history


def _check_classes(dataset: LabeledDataset, cfg: ModelConfig):
    if dataset.n_classes != cfg.n_classes:
        raise ConfigError(f"dataset has {dataset.n_classes} classes, model expects {cfg.n_classes}")


def train(model: Model, dataset: LabeledDataset, config: TrainConfig):
    """Supervised training on the hard loss.  Returns ``(trained copy, history)``."""
    _check_classes(dataset, model.config)
    X = float_inputs(dataset.X, model.config, model.dtype)
    return fit_inputs(model, X, dataset.labels, dataset.task_kind, config)


def distill(teacher: Model, student_config: ModelConfig, dataset: LabeledDataset, config: TrainConfig):
    """Train a fresh student on ``(1 - a) hard + a KD`` against a frozen teacher.

    Returns ``(student, history)``.  With ``alpha_kd == 0`` the result is
    identical to :func:`train` on ``build_model(student_config)``.
    """
    if teacher.config.n_classes != student_config.n_classes:
        raise ConfigError(
            f"teacher predicts {teacher.config.n_classes} classes, student {student_config.n_classes}")
    _check_classes(dataset, student_config)
    student = build_model(student_config, teacher.dtype)
    X = float_inputs(dataset.X, student_config, student.dtype)
    Xt = float_inputs(dataset.X, teacher.config, teacher.dtype)
    return fit_inputs(student, X, dataset.labels, dataset.task_kind, config, teacher, Xt)


def distill_grid(teacher: Model, student_config: ModelConfig, dataset: LabeledDataset, config: TrainConfig,
                 alphas=(0.3, 0.5, 0.7)) -> dict:
    """One distillation run per KD strength; ``{alpha: (student, history)}``."""
    return {a: distill(teacher, student_config, dataset, replace(config, alpha_kd=a)) for a in alphas}
