"""Raw windows -> Q7 model inputs, shared by training, CLI and profiler."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .posenc import PosEncodingTable, build_pe_tables, encode_positions
from .preprocess import dequantize_q7, quantize_q7, zscore_array

# z-scores are divided by this before Q7 so +-4 sigma fits the int8 grid
Q7_SIGMA_RANGE = 4.0


@lru_cache(maxsize=32)
def pe_table(T: int, F: int, alpha: float) -> PosEncodingTable:
    return build_pe_tables(T, F, alpha)


def signal_to_q7(X, target_channels: int | None = None, sigma_range: float = Q7_SIGMA_RANGE) -> np.ndarray:
    """Zero-pad channels, z-score per channel and quantize to Q7.

    ``X`` is (N, C, T) or (C, T); returns int8 codes of the same rank.
    """
    X = np.asarray(X, dtype=np.float64)
    if target_channels is not None and target_channels > X.shape[-2]:
        pad = [(0, 0)] * X.ndim
        pad[-2] = (0, target_channels - X.shape[-2])
        X = np.pad(X, pad)
    return quantize_q7(zscore_array(X) / sigma_range)


def augment_q7(q7, config) -> np.ndarray:
    """Append positional channels when the model config uses them."""
    if not config.use_positional:
        return np.asarray(q7, dtype=np.int8)
    return encode_positions(pe_table(config.window_len, config.n_freqs, config.pe_alpha), q7)


def model_inputs(X, config) -> np.ndarray:
    """Raw (N, C, T) windows -> int8 augmented model input."""
    return augment_q7(signal_to_q7(X, config.signal_channels), config)


def float_inputs(X, config, dtype=np.float32) -> np.ndarray:
    """Model inputs on the Q7 grid, as floats for the float model."""
    return dequantize_q7(model_inputs(X, config)).astype(dtype)
