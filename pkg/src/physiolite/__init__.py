"""Q7 fixed-point biosignal classification for microcontroller NPUs.

Signal I/O and conditioning, Q7 preprocessing and positional encoding, a
multi-scale convolutional classifier with float training, distillation and
int8 inference, plus memory budgeting and host latency profiling.
"""

__version__ = "0.1.0"

from .exceptions import ConfigError, DataError, PhysioLiteError, TrainingError
from .model import (Model, ModelConfig, QuantizedModel, budget_report, build_model, calibrate_and_quantize,
                    ecg_config, emg_config, infer_float, infer_int8)
from .posenc import build_pe_tables, encode_positions
from .preprocess import dequantize_q7, preprocess_window, quantize_q7
from .signal_io import LabeledDataset, MultiChannelSignal, SignalWindow, gen_synthetic, read_signal, write_signal
from .training import TrainConfig, distill, train
from .weights_io import load_weights, save_weights

__all__ = [
    "ConfigError", "DataError", "PhysioLiteError", "TrainingError",
    "Model", "ModelConfig", "QuantizedModel", "budget_report", "build_model", "calibrate_and_quantize",
    "ecg_config", "emg_config", "infer_float", "infer_int8",
    "build_pe_tables", "encode_positions", "dequantize_q7", "preprocess_window", "quantize_q7",
    "LabeledDataset", "MultiChannelSignal", "SignalWindow", "gen_synthetic", "read_signal", "write_signal",
    "TrainConfig", "distill", "train", "load_weights", "save_weights",
]
