"""On-device preprocessing stages: resample, pad, z-score, Q7 quantization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DataError
from .signal_io import SignalWindow

Q7_SCALE = 128
Q7_MIN, Q7_MAX = -128, 127
ZSCORE_EPSILON = 1e-6


@dataclass(frozen=True)
class ChannelStats:
    """Pre-normalization statistics; ``var`` is the population variance."""

    mean: np.ndarray
    var: np.ndarray
    count: int


def resample_linear(window: SignalWindow, target_rate_hz: float) -> SignalWindow:
    """Linearly resample to ``target_rate_hz`` keeping both endpoints.

    Output sample ``j`` sits at source position ``j * (n_in - 1) / (n_out - 1)``.
    Channels are processed one at a time through a single scratch buffer.
    """
    if not target_rate_hz > 0:
        raise ConfigError(f"target rate must be positive, got {target_rate_hz}")
    n_in = window.window_len
    n_out = int(round(n_in * target_rate_hz / window.sample_rate_hz))
    if n_out < 2:
        raise DataError(f"resampled length {n_out} < 2")
    if n_out == n_in:
        return SignalWindow(window.data.copy(), target_rate_hz, window.offset)
    positions = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    # pin the last position so the final sample is copied exactly
    positions[-1] = n_in - 1
    left = np.minimum(np.floor(positions).astype(np.int64), n_in - 2)
    frac = positions - left
    out = np.empty((window.channels, n_out))
    scratch = np.empty(n_out)
    for c in range(window.channels):
        src = window.data[c]
        np.multiply(src[left + 1] - src[left], frac, out=scratch)
        scratch += src[left]
        out[c] = scratch
    return SignalWindow(out, target_rate_hz, window.offset)


def zero_pad_channels(window: SignalWindow, target_channels: int) -> SignalWindow:
    if target_channels < window.channels:
        raise ConfigError(f"cannot pad {window.channels} channels down to {target_channels}")
    if target_channels == window.channels:
        return window
    out = np.zeros((target_channels, window.window_len))
    out[:window.channels] = window.data
    return SignalWindow(out, window.sample_rate_hz, window.offset)


def welford_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Single-pass mean and population variance along the last axis.

    Leading axes are processed in parallel; the recurrence walks time once.
    """
    x = np.asarray(x, dtype=np.float64)
    mean = np.zeros(x.shape[:-1])
    m2 = np.zeros(x.shape[:-1])
    for n in range(1, x.shape[-1] + 1):
        sample = x[..., n - 1]
        delta = sample - mean
        mean = mean + delta / n
        m2 = m2 + delta * (sample - mean)
    return mean, m2 / x.shape[-1]


def zscore_streaming(window: SignalWindow, epsilon: float = ZSCORE_EPSILON) -> tuple[SignalWindow, ChannelStats]:
    if window.window_len < 2:
        raise DataError("z-score needs at least 2 samples")
    mean, var = welford_stats(window.data)
    out = (window.data - mean[:, None]) / np.sqrt(var + epsilon)[:, None]
    return SignalWindow(out, window.sample_rate_hz, window.offset), ChannelStats(mean, var, window.window_len)


def zscore_array(X: np.ndarray, epsilon: float = ZSCORE_EPSILON) -> np.ndarray:
    """Batched per-channel z-score of an (..., T) array via Welford."""
    mean, var = welford_stats(X)
    return (X - mean[..., None]) / np.sqrt(var + epsilon)[..., None]


def minmax_normalize(window: SignalWindow) -> SignalWindow:
    """Per-channel scaling to [0, 1]; constant channels map to 0.5."""
    x = window.data
    lo = x.min(axis=1, keepdims=True)
    span = x.max(axis=1, keepdims=True) - lo
    flat = span[:, 0] == 0
    out = (x - lo) / np.where(span == 0, 1.0, span)
    out[flat] = 0.5
    return SignalWindow(out, window.sample_rate_hz, window.offset)


def quantize_q7(values) -> np.ndarray:
    """Map reals to Q7 codes, rounding half away from zero and saturating."""
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise DataError("cannot quantize non-finite values")
    scaled = x * Q7_SCALE
    rounded = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(rounded, Q7_MIN, Q7_MAX).astype(np.int8)


def dequantize_q7(q) -> np.ndarray:
    return np.asarray(q, dtype=np.int8).astype(np.float64) / Q7_SCALE


def preprocess_window(window: SignalWindow, target_rate_hz: float | None = None,
                      target_channels: int | None = None, target_len: int | None = None,
                      sigma_range: float = 1.0):
    """Stages 1-4 of the device pipeline; returns (Q7 codes, stats).

    ``target_len`` crops or zero-pads the time axis after resampling so the
    output has the fixed model length.  z-scores are divided by
    ``sigma_range`` before quantization.
    """
    w = window
    if target_rate_hz is not None and target_rate_hz != w.sample_rate_hz:
        w = resample_linear(w, target_rate_hz)
    if target_channels is not None:
        w = zero_pad_channels(w, target_channels)
    if target_len is not None and w.window_len != target_len:
        w = fit_length(w, target_len)
    z, stats = zscore_streaming(w)
    return quantize_q7(z.data / sigma_range), stats


def fit_length(window: SignalWindow, target_len: int) -> SignalWindow:
    """Crop or zero-pad along time to ``target_len`` samples."""
    out = np.zeros((window.channels, target_len))
    n = min(target_len, window.window_len)
    out[:, :n] = window.data[:, :n]
    return SignalWindow(out, window.sample_rate_hz, window.offset)
