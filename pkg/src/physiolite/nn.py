"""1D tensor kernels.

Float ops return ``(output, cache)`` and have matching ``*_backward``
functions that take the cache.  Arrays are (N, C, L) for conv layers and
(N, features) for dense layers; unbatched (C, L) input is accepted by the
forward ops.

The int8 twins accumulate in int32-range integers and requantize with a
fixed-point multiplier and right shift, so results do not depend on
floating point behaviour.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigError, DataError

INT32_MAX = 2 ** 31 - 1


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    padding: int | str = "same"
    groups: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1:
            raise ConfigError("kernel_size and stride must be >= 1")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(f"channels ({self.in_channels}->{self.out_channels}) not divisible by groups={self.groups}")

    @property
    def pad(self) -> int:
        if self.padding == "same":
            return self.kernel_size // 2
        if self.padding == "valid":
            return 0
        return int(self.padding)

    @property
    def weight_shape(self) -> tuple:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_size)

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels and self.groups > 1

    def out_length(self, length: int) -> int:
        return (length + 2 * self.pad - self.kernel_size) // self.stride + 1


def _batched(x):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 2 else (x, False)


def _im2col(xp: np.ndarray, k: int, stride: int, l_out: int) -> np.ndarray:
    # (N, C, Lp) -> (N, C*k, l_out)
    win = sliding_window_view(xp, k, axis=-1)[:, :, ::stride][:, :, :l_out]
    n, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(n, c * k, l_out)


def conv1d_forward(x, weight, bias, spec: ConvSpec):
    x, squeeze = _batched(x)
    weight = np.asarray(weight)
    if x.shape[1] != spec.in_channels or weight.shape != spec.weight_shape:
        raise DataError(f"conv shape mismatch: input {x.shape}, weight {weight.shape}, spec {spec}")
    l_out = spec.out_length(x.shape[-1])
    if l_out < 1:
        raise DataError(f"input length {x.shape[-1]} too short for kernel {spec.kernel_size}")
    p = spec.pad
    xp = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x
    k, s = spec.kernel_size, spec.stride
    cache = {"xp": xp, "weight": weight, "spec": spec, "in_len": x.shape[-1], "l_out": l_out}
    if spec.groups == 1:
        cols = _im2col(xp, k, s, l_out)
        y = weight.reshape(spec.out_channels, -1) @ cols
        cache["cols"] = cols
    elif spec.is_depthwise:
        span = s * (l_out - 1) + 1
        y = np.zeros((x.shape[0], spec.out_channels, l_out), dtype=np.result_type(x, weight))
        for j in range(k):
            y += weight[None, :, 0, j, None] * xp[:, :, j:j + span:s]
    else:
        g = spec.groups
        cin, cout = spec.in_channels // g, spec.out_channels // g
        parts, cols_g = [], []
        for gi in range(g):
            cols = _im2col(xp[:, gi * cin:(gi + 1) * cin], k, s, l_out)
            parts.append(weight[gi * cout:(gi + 1) * cout].reshape(cout, -1) @ cols)
            cols_g.append(cols)
        y = np.concatenate(parts, axis=1)
        cache["cols_g"] = cols_g
    if bias is not None:
        y = y + np.asarray(bias)[None, :, None]
    return (y[0] if squeeze else y), cache


def conv1d_backward(grad_out, cache):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    if cache is None:
        raise DataError("conv1d_backward needs the cache saved by conv1d_forward")
    spec: ConvSpec = cache["spec"]
    grad_out, squeeze = _batched(grad_out)
    xp, weight, l_out = cache["xp"], cache["weight"], cache["l_out"]
    k, s = spec.kernel_size, spec.stride
    span = s * (l_out - 1) + 1
    n = grad_out.shape[0]
    grad_bias = grad_out.sum(axis=(0, 2))
    gxp = np.zeros_like(xp, dtype=np.result_type(xp, grad_out))

    if spec.groups == 1:
        cols = cache["cols"]
        go2 = grad_out.transpose(1, 0, 2).reshape(spec.out_channels, -1)
        cols2 = cols.transpose(1, 0, 2).reshape(cols.shape[1], -1)
        grad_weight = (go2 @ cols2.T).reshape(weight.shape)
        gcols = (weight.reshape(spec.out_channels, -1).T @ grad_out).reshape(n, spec.in_channels, k, l_out)
        for j in range(k):
            gxp[:, :, j:j + span:s] += gcols[:, :, j]
    elif spec.is_depthwise:
        grad_weight = np.zeros_like(weight, dtype=gxp.dtype)
        for j in range(k):
            grad_weight[:, 0, j] = np.einsum("ncl,ncl->c", grad_out, xp[:, :, j:j + span:s])
            gxp[:, :, j:j + span:s] += weight[None, :, 0, j, None] * grad_out
    else:
        g = spec.groups
        cin, cout = spec.in_channels // g, spec.out_channels // g
        grad_weight = np.zeros_like(weight, dtype=gxp.dtype)
        for gi in range(g):
            go = grad_out[:, gi * cout:(gi + 1) * cout]
            cols = cache["cols_g"][gi]
            w = weight[gi * cout:(gi + 1) * cout].reshape(cout, -1)
            grad_weight[gi * cout:(gi + 1) * cout] = np.einsum("nol,nkl->ok", go, cols).reshape(cout, cin, k)
            gcols = (w.T @ go).reshape(n, cin, k, l_out)
            for j in range(k):
                gxp[:, gi * cin:(gi + 1) * cin, j:j + span:s] += gcols[:, :, j]

    p = spec.pad
    grad_input = gxp[:, :, p:p + cache["in_len"]] if p else gxp
    return (grad_input[0] if squeeze else grad_input), grad_weight, grad_bias


def relu_forward(x):
    x = np.asarray(x)
    return np.maximum(x, 0), x


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def global_avg_pool_forward(x):
    x = np.asarray(x)
    if x.shape[-1] < 1:
        raise DataError("cannot pool an empty sequence")
    return x.mean(axis=-1), x.shape[-1]


def global_avg_pool_backward(grad_out, length: int):
    grad_out = np.asarray(grad_out)
    return np.repeat(grad_out[..., None] / length, length, axis=-1)


def dense_forward(x, weight, bias):
    """``y = W x + b`` applied row-wise to an (N, in) batch."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    if x.shape[-1] != weight.shape[1]:
        raise DataError(f"dense shape mismatch: input {x.shape}, weight {weight.shape}")
    # one matmul per row keeps results independent of batch composition
    y = (x[:, None, :] @ weight.T)[:, 0]
    if bias is not None:
        y = y + bias
    return (y[0] if squeeze else y), (x, weight)


def dense_backward(grad_out, cache):
    x, weight = cache
    grad_out = np.asarray(grad_out)
    squeeze = grad_out.ndim == 1
    if squeeze:
        grad_out = grad_out[None]
    grad_x = grad_out @ weight
    return (grad_x[0] if squeeze else grad_x), grad_out.T @ x, grad_out.sum(axis=0)


# ---------------------------------------------------------------------------
# int8


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ConfigError(f"quantization scale must be positive, got {self.scale}")
        if not -128 <= self.zero_point <= 127:
            raise ConfigError(f"zero point {self.zero_point} outside int8 range")

    def quantize(self, x) -> np.ndarray:
        q = np.floor(np.asarray(x, dtype=np.float64) / self.scale + 0.5) + self.zero_point
        return np.clip(q, -128, 127).astype(np.int8)

    def dequantize(self, q) -> np.ndarray:
        return (np.asarray(q, dtype=np.float64) - self.zero_point) * self.scale


Q7_PARAMS = QuantParams(1.0 / 128, 0)


def symmetric_weight_params(w, floor: float = 1e-8) -> QuantParams:
    return QuantParams(max(float(np.max(np.abs(w))) / 127.0, floor), 0)


def affine_activation_params(lo: float, hi: float, floor: float = 1e-8) -> QuantParams:
    """Per-tensor affine params covering ``[lo, hi]`` (always including 0)."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = max((hi - lo) / 255.0, floor)
    zp = int(np.clip(round(-128 - lo / scale), -128, 127))
    return QuantParams(scale, zp)


@dataclass(frozen=True)
class FixedPointMultiplier:
    """``real ~= multiplier * 2**-shift`` with a 31-bit mantissa."""

    multiplier: int
    shift: int

    @classmethod
    def from_real(cls, real: float) -> "FixedPointMultiplier":
        if not real > 0:
            raise ConfigError(f"requantization scale must be positive, got {real}")
        mant, exp = math.frexp(real)
        m0 = int(round(mant * (1 << 31)))
        if m0 == 1 << 31:
            m0 //= 2
            exp += 1
        shift = 31 - exp
        if shift < 1:
            raise ConfigError(f"requantization scale {real} too large")
        if shift > 62:
            return cls(0, 1)
        return cls(m0, shift)

    @property
    def real(self) -> float:
        return self.multiplier / 2.0 ** self.shift

    def apply(self, acc) -> np.ndarray:
        """Round-half-up fixed-point multiply: ``floor(acc*m / 2**s + 1/2)``."""
        acc = np.asarray(acc, dtype=np.int64)
        return (acc * self.multiplier + (1 << (self.shift - 1))) >> self.shift


def requantize(acc, mult: FixedPointMultiplier, zero_point: int, relu: bool = False) -> np.ndarray:
    q = mult.apply(acc) + zero_point
    lo = zero_point if relu else -128
    return np.clip(q, lo, 127).astype(np.int8)


def accumulator_bound(weight_q, in_qp: QuantParams, bias_q=None) -> int:
    """Worst-case |int32 accumulator| for one output of a conv/dense layer."""
    max_in = max(127 - in_qp.zero_point, in_qp.zero_point + 128)
    w = np.abs(np.asarray(weight_q, dtype=np.int64)).reshape(weight_q.shape[0], -1)
    per_out = w.sum(axis=1) * max_in
    if bias_q is not None:
        per_out = per_out + np.abs(np.asarray(bias_q, dtype=np.int64))
    return int(per_out.max())


def check_accumulator(weight_q, in_qp: QuantParams, bias_q=None, name: str = "layer") -> None:
    bound = accumulator_bound(weight_q, in_qp, bias_q)
    if bound > INT32_MAX:
        raise ConfigError(f"{name}: accumulator bound {bound} overflows int32")


def quantize_bias(bias, in_qp: QuantParams, w_qp: QuantParams) -> np.ndarray:
    scale = in_qp.scale * w_qp.scale
    return np.floor(np.asarray(bias, dtype=np.float64) / scale + 0.5).astype(np.int32)


def conv1d_int8(input_q, weights_q, bias_i32, spec: ConvSpec, in_qp: QuantParams, w_qp: QuantParams,
                out_qp: QuantParams, relu: bool = False) -> np.ndarray:
    """Integer conv: int32 accumulation, fixed-point requantization."""
    x, squeeze = _batched(input_q)
    if x.dtype != np.int8:
        raise DataError(f"conv1d_int8 expects int8 input, got {x.dtype}")
    if np.asarray(weights_q).dtype != np.int8:
        raise DataError("conv1d_int8 expects int8 weights")
    check_accumulator(weights_q, in_qp, bias_i32)
    # zero padding happens in the real domain, i.e. at the input zero point
    centred = x.astype(np.int64) - in_qp.zero_point
    acc, _ = conv1d_forward(centred, np.asarray(weights_q, dtype=np.int64), None, spec)
    if bias_i32 is not None:
        acc = acc + np.asarray(bias_i32, dtype=np.int64)[None, :, None]
    mult = FixedPointMultiplier.from_real(in_qp.scale * w_qp.scale / out_qp.scale)
    out = requantize(acc, mult, out_qp.zero_point, relu)
    return out[0] if squeeze else out


def dense_int8(input_q, weights_q, bias_i32, in_qp: QuantParams, w_qp: QuantParams, out_qp: QuantParams,
               relu: bool = False) -> np.ndarray:
    x = np.asarray(input_q)
    check_accumulator(weights_q, in_qp, bias_i32)
    acc = (x.astype(np.int64) - in_qp.zero_point) @ np.asarray(weights_q, dtype=np.int64).T
    if bias_i32 is not None:
        acc = acc + np.asarray(bias_i32, dtype=np.int64)
    mult = FixedPointMultiplier.from_real(in_qp.scale * w_qp.scale / out_qp.scale)
    return requantize(acc, mult, out_qp.zero_point, relu)


_ADD_FRAC_BITS = 8


def add_int8(a, a_qp: QuantParams, b, b_qp: QuantParams, out_qp: QuantParams) -> np.ndarray:
    """Saturating residual add after rescaling both operands to ``out_qp``."""
    ma = FixedPointMultiplier.from_real(a_qp.scale / out_qp.scale * 2 ** _ADD_FRAC_BITS)
    mb = FixedPointMultiplier.from_real(b_qp.scale / out_qp.scale * 2 ** _ADD_FRAC_BITS)
    ta = ma.apply(np.asarray(a, dtype=np.int64) - a_qp.zero_point)
    tb = mb.apply(np.asarray(b, dtype=np.int64) - b_qp.zero_point)
    total = (ta + tb + (1 << (_ADD_FRAC_BITS - 1))) >> _ADD_FRAC_BITS
    return np.clip(total + out_qp.zero_point, -128, 127).astype(np.int8)


def global_avg_pool_int8(x, in_qp: QuantParams, out_qp: QuantParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    acc = (x - in_qp.zero_point).sum(axis=-1)
    mult = FixedPointMultiplier.from_real(in_qp.scale / (x.shape[-1] * out_qp.scale))
    return requantize(acc, mult, out_qp.zero_point)
