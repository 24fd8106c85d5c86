"""Classification metrics: accuracy, macro/micro F1 and one-vs-rest AUROC."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .exceptions import DataError


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    micro_f1: float
    auroc: float
    per_class_f1: tuple = ()
    per_class_auroc: tuple = ()
    auroc_excluded: tuple = field(default=())

    @property
    def headline_f1(self) -> float:
        return self.macro_f1


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def binary_auroc(scores, positives) -> float:
    """Mann-Whitney AUROC; ties count one half.  NaN when undefined."""
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return math.nan
    ranks = rankdata(scores)
    return (ranks[positives].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)


def _f1(tp, fp, fn) -> float:
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def evaluate(logits, labels, task_kind: str = "single-label", threshold: float = 0.5) -> Metrics:
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels)
    n, n_classes = logits.shape
    if task_kind == "single-label":
        if labels.shape != (n,):
            raise DataError(f"labels shape {labels.shape} does not match {n} samples")
        truth = np.eye(n_classes, dtype=bool)[labels]
        pred = np.eye(n_classes, dtype=bool)[logits.argmax(axis=1)]
        scores = softmax(logits)
        accuracy = float(np.mean(logits.argmax(axis=1) == labels))
    elif task_kind == "multi-label":
        if labels.shape != logits.shape:
            raise DataError(f"labels shape {labels.shape} does not match logits {logits.shape}")
        if not 0 < threshold < 1:
            raise DataError("threshold must lie in (0, 1)")
        truth = labels.astype(bool)
        scores = sigmoid(logits)
        pred = scores >= threshold
        accuracy = float(np.mean(np.all(pred == truth, axis=1)))
    else:
        raise DataError(f"unknown task_kind {task_kind!r}")

    tp = (pred & truth).sum(axis=0)
    fp = (pred & ~truth).sum(axis=0)
    fn = (~pred & truth).sum(axis=0)
    per_f1 = tuple(_f1(tp[c], fp[c], fn[c]) for c in range(n_classes))
    micro = _f1(tp.sum(), fp.sum(), fn.sum())
    per_auc = tuple(binary_auroc(scores[:, c], truth[:, c]) for c in range(n_classes))
    excluded = tuple(c for c, a in enumerate(per_auc) if math.isnan(a))
    defined = [a for a in per_auc if not math.isnan(a)]
    auroc = float(np.mean(defined)) if defined else math.nan
    return Metrics(accuracy, float(np.mean(per_f1)), float(micro), auroc, per_f1, per_auc, excluded)
