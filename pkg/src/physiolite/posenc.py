"""Sinusoidal positional channels computed on the host from Q7 lookup tables.

Frequency ``k`` repeats every ``T / 2**k`` samples, so one base period per
frequency is stored and indexed modulo its length.  When ``2**k`` does not
divide ``T`` the full ``T``-long sequence is stored instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, DataError
from .preprocess import dequantize_q7, quantize_q7

DEFAULT_ALPHA = 0.1
DEFAULT_FREQS = {"emg": 8, "ecg": 12}


def pe_value(t, k: int, T: int):
    """Unscaled (sin, cos) of ``2*pi * 2**k * t / T``; ``t`` may be an array."""
    phase = 2.0 * math.pi * (2.0 ** k) * np.asarray(t, dtype=np.float64) / T
    return np.sin(phase), np.cos(phase)


def period_length(T: int, k: int) -> int:
    step = 2 ** k
    return T // step if T % step == 0 else T


@dataclass(frozen=True)
class PosEncodingTable:
    T: int
    F: int
    alpha: float
    sin_luts: tuple
    cos_luts: tuple

    @property
    def periods(self) -> tuple:
        return tuple(len(lut) for lut in self.sin_luts)

    @property
    def nbytes(self) -> int:
        return sum(l.nbytes for l in self.sin_luts) + sum(l.nbytes for l in self.cos_luts)

    @property
    def n_channels(self) -> int:
        return 2 * self.F

    def positional_codes(self) -> np.ndarray:
        """(2F, T) int8 positional channels, ordered sin0, cos0, sin1, ..."""
        t = np.arange(self.T)
        out = np.empty((2 * self.F, self.T), dtype=np.int8)
        for k in range(self.F):
            idx = t % len(self.sin_luts[k])
            out[2 * k] = self.sin_luts[k][idx]
            out[2 * k + 1] = self.cos_luts[k][idx]
        return out

    def dump(self) -> str:
        """Debug text: one ``k t sin_code cos_code`` line per stored entry."""
        lines = []
        for k in range(self.F):
            for t, (s, c) in enumerate(zip(self.sin_luts[k], self.cos_luts[k])):
                lines.append(f"{k} {t} {int(s)} {int(c)}")
        return "\n".join(lines) + "\n"


def build_pe_tables(T: int, F: int, alpha: float = DEFAULT_ALPHA) -> PosEncodingTable:
    if T < 2 or F < 1:
        raise ConfigError(f"need T >= 2 and F >= 1, got T={T}, F={F}")
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must be in (0, 1], got {alpha}")
    sin_luts, cos_luts = [], []
    for k in range(F):
        t = np.arange(period_length(T, k))
        s, c = pe_value(t, k, T)
        for lut, vals in ((sin_luts, s), (cos_luts, c)):
            codes = quantize_q7(alpha * vals)
            codes.setflags(write=False)
            lut.append(codes)
    return PosEncodingTable(T, F, float(alpha), tuple(sin_luts), tuple(cos_luts))


def encode_positions(table: PosEncodingTable, window) -> np.ndarray:
    """Append the 2F positional channels to ``window``.

    ``window`` is a (C, T) or (N, C, T) array.  Integer input is treated
    as Q7 codes and the result is int8; float input gets dequantized
    positional channels appended and stays float.
    """
    x = np.asarray(getattr(window, "data", window))
    if x.shape[-1] != table.T:
        raise DataError(f"window length {x.shape[-1]} does not match table length {table.T}")
    codes = table.positional_codes()
    if np.issubdtype(x.dtype, np.integer):
        pos = codes
        x = x.astype(np.int8)
    else:
        pos = dequantize_q7(codes).astype(x.dtype)
    if x.ndim == 3:
        pos = np.broadcast_to(pos, (x.shape[0],) + pos.shape)
    return np.concatenate([x, pos], axis=-2)


def direct_positional_codes(T: int, F: int, alpha: float) -> np.ndarray:
    """Reference path: evaluate every (k, t) directly, then quantize."""
    t = np.arange(T)
    rows = []
    for k in range(F):
        s, c = pe_value(t, k, T)
        rows += [quantize_q7(alpha * s), quantize_q7(alpha * c)]
    return np.stack(rows)
