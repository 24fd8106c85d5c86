"""Explicit signal conditioning for baseline-parity preprocessing.

None of this runs on the device path; the learnable front-end replaces it.
Filters are stored as second-order sections ``(b0, b1, b2, a1, a2)``
with ``a0`` normalised to one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps

from .exceptions import ConfigError, DataError
from .preprocess import welford_stats
from .signal_io import MultiChannelSignal

NOTCH_HZ = 50.0
NOTCH_Q = 30.0
ECG_BAND_HZ = (0.67, 40.0)
EMG_LOW_HZ = 20.0
EMG_HIGH_FRACTION = 0.95
BASELINE_KERNEL_S = 0.4
BUTTER_ORDER = 4


@dataclass(frozen=True)
class IIRFilter:
    sections: np.ndarray  # (n_sections, 5): b0, b1, b2, a1, a2
    kind: str
    fs_hz: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        sec = np.asarray(self.sections, dtype=np.float64).reshape(-1, 5)
        if not np.all(np.isfinite(sec)):
            raise ConfigError("filter coefficients must be finite")
        for a1, a2 in sec[:, 3:]:
            if np.any(np.abs(np.roots([1.0, a1, a2])) >= 1.0):
                raise ConfigError(f"unstable section in {self.kind} filter")
        sec.setflags(write=False)
        object.__setattr__(self, "sections", sec)

    @property
    def sos(self) -> np.ndarray:
        """scipy-style (n, 6) array."""
        n = len(self.sections)
        return np.ascontiguousarray(np.column_stack([self.sections[:, :3], np.ones(n), self.sections[:, 3:]]))

    @property
    def padlen(self) -> int:
        return 3 * (2 * len(self.sections) + 1)

    def response(self, freqs_hz) -> np.ndarray:
        """Complex frequency response at ``freqs_hz``."""
        _, h = sps.sosfreqz(self.sos, worN=np.atleast_1d(np.asarray(freqs_hz, dtype=float)), fs=self.fs_hz)
        return h


def _from_sos(sos: np.ndarray, kind: str, fs_hz: float, **meta) -> IIRFilter:
    sos = np.asarray(sos, dtype=np.float64)
    sections = sos[:, [0, 1, 2, 4, 5]] / sos[:, 3:4]
    return IIRFilter(sections, kind, fs_hz, meta)


def design_butterworth_bandpass(order: int, lo_hz: float, hi_hz: float, fs_hz: float) -> IIRFilter:
    """Digital Butterworth band-pass via prewarped bilinear transform.

    ``order`` is the low-pass prototype order; the result has ``order``
    second-order sections.
    """
    if order < 2 or order % 2:
        raise ConfigError(f"band-pass order must be even and >= 2, got {order}")
    if not 0 < lo_hz < hi_hz < fs_hz / 2:
        raise ConfigError(f"need 0 < lo < hi < fs/2, got lo={lo_hz}, hi={hi_hz}, fs={fs_hz}")
    sos = sps.butter(order, [lo_hz, hi_hz], btype="bandpass", fs=fs_hz, output="sos")
    return _from_sos(sos, "butterworth-bandpass", fs_hz, order=order, lo_hz=lo_hz, hi_hz=hi_hz)


def design_iir_notch(f0_hz: float, q: float, fs_hz: float) -> IIRFilter:
    if not 0 < f0_hz < fs_hz / 2:
        raise ConfigError(f"notch frequency must be in (0, fs/2), got {f0_hz}")
    if not q > 0:
        raise ConfigError(f"notch Q must be positive, got {q}")
    b, a = sps.iirnotch(f0_hz, q, fs=fs_hz)
    return _from_sos(sps.tf2sos(b, a), "notch", fs_hz, f0_hz=f0_hz, q=q)


def filtfilt(filt: IIRFilter, x) -> np.ndarray:
    """Zero-phase forward-backward filtering along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] <= filt.padlen:
        raise DataError(f"signal of {x.shape[-1]} samples too short for zero-phase filtering (need > {filt.padlen})")
    return sps.sosfiltfilt(filt.sos, x, axis=-1, padtype="odd", padlen=filt.padlen)


def median_kernel_samples(kernel_seconds: float, fs_hz: float) -> int:
    k = int(round(kernel_seconds * fs_hz))
    return k + 1 if k % 2 == 0 else k


def running_median(x: np.ndarray, kernel: int) -> np.ndarray:
    """Centered running median; windows shrink at the edges (no padding)."""
    n = len(x)
    half = kernel // 2
    out = np.empty(n)
    if n >= kernel:
        out[half:n - half] = np.median(sliding_window_view(x, kernel), axis=1)
        edge = list(range(half)) + list(range(n - half, n))
    else:
        edge = range(n)
    for i in edge:
        out[i] = np.median(x[max(0, i - half):i + half + 1])
    return out


def median_baseline_remove(x, kernel_seconds: float, fs_hz: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    kernel = median_kernel_samples(kernel_seconds, fs_hz)
    if kernel > x.shape[-1]:
        raise DataError(f"median kernel of {kernel} samples exceeds signal length {x.shape[-1]}")
    flat = x.reshape(-1, x.shape[-1])
    baseline = np.stack([running_median(row, kernel) for row in flat]).reshape(x.shape)
    return x - baseline


def _zscore(x: np.ndarray, epsilon: float = 1e-6) -> np.ndarray:
    mean, var = welford_stats(x)
    return (x - mean[..., None]) / np.sqrt(var + epsilon)[..., None]


def condition_ecg(signal: MultiChannelSignal) -> MultiChannelSignal:
    """Notch at 50 Hz, 0.67-40 Hz band-pass, median baseline removal, z-score."""
    fs = signal.sample_rate_hz
    x = filtfilt(design_iir_notch(NOTCH_HZ, NOTCH_Q, fs), signal.data)
    x = filtfilt(design_butterworth_bandpass(BUTTER_ORDER, *ECG_BAND_HZ, fs), x)
    x = median_baseline_remove(x, BASELINE_KERNEL_S, fs)
    return MultiChannelSignal(_zscore(x), fs)


def condition_emg(signal: MultiChannelSignal) -> MultiChannelSignal:
    """20 Hz to 0.95 x Nyquist band-pass, then 50 Hz notch, then z-score."""
    fs = signal.sample_rate_hz
    x = filtfilt(design_butterworth_bandpass(BUTTER_ORDER, EMG_LOW_HZ, EMG_HIGH_FRACTION * fs / 2, fs), signal.data)
    x = filtfilt(design_iir_notch(NOTCH_HZ, NOTCH_Q, fs), x)
    return MultiChannelSignal(_zscore(x), fs)
