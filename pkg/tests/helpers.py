"""Oracles shared by several test modules."""

import numpy as np

H = 1e-4


def numeric_grad(f, x, h=H):
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def conv_loop(x, w, b, stride, pad, groups=1):
    """Direct triple loop 1D convolution (cross-correlation) on (C, L) input."""
    c_in, length = x.shape
    c_out, c_per, k = w.shape
    xp = np.zeros((c_in, length + 2 * pad))
    xp[:, pad:pad + length] = x
    l_out = (length + 2 * pad - k) // stride + 1
    out_per = c_out // groups
    y = np.zeros((c_out, l_out))
    for o in range(c_out):
        g = o // out_per
        for t in range(l_out):
            acc = 0.0 if b is None else float(b[o])
            for ci in range(c_per):
                for j in range(k):
                    acc += w[o, ci, j] * xp[g * c_per + ci, t * stride + j]
            y[o, t] = acc
    return y


def f1_oracle(pred, truth):
    """Per-class F1 from explicit TP/FP/FN counting loops."""
    n, c = len(truth), len(truth[0])
    out = []
    tps = fps = fns = 0
    for j in range(c):
        tp = fp = fn = 0
        for i in range(n):
            if pred[i][j] and truth[i][j]:
                tp += 1
            elif pred[i][j]:
                fp += 1
            elif truth[i][j]:
                fn += 1
        out.append(0.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
        tps, fps, fns = tps + tp, fps + fp, fns + fn
    micro = 0.0 if tps + fps + fns == 0 else 2 * tps / (2 * tps + fps + fns)
    return out, micro


def auroc_oracle(scores, positive):
    """Fraction of (positive, negative) pairs ranked correctly; ties count one half."""
    pos = [s for s, p in zip(scores, positive) if p]
    neg = [s for s, p in zip(scores, positive) if not p]
    if not pos or not neg:
        return None
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))
