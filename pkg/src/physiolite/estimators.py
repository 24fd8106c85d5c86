"""scikit-learn compatible wrappers.

Windows are (n_windows, channels, window_len) arrays.  The transformers
reproduce the device pipeline and compose in a ``Pipeline``::

    Pipeline([("q7", Q7Preprocessor()),
              ("pe", PositionalEncoder(n_freqs=8)),
              ("clf", PhysioLiteClassifier(input_kind="q7", n_freqs=8))])

``PhysioLiteClassifier`` can also take raw float windows directly
(``input_kind="raw"``, the default) and then applies the same steps itself.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DataError
from .metrics import sigmoid, softmax
from .model import ModelConfig, build_model, calibrate_and_quantize, infer_int8
from .pipeline import Q7_SIGMA_RANGE, model_inputs, pe_table, signal_to_q7
from .posenc import encode_positions
from .preprocess import dequantize_q7
from .training import TrainConfig, fit_inputs, predict_logits


def check_windows(X, *, dtype=None, name: str = "X") -> np.ndarray:
    """Validate a batch of windows: 3-D, non-empty, finite."""
    X = np.asarray(X) if dtype is None else np.asarray(X, dtype=dtype)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise DataError(f"{name} must be (n_windows, channels, window_len), got shape {X.shape}")
    if X.shape[0] == 0 or X.shape[1] == 0 or X.shape[2] == 0:
        raise DataError(f"{name} is empty: shape {X.shape}")
    if np.issubdtype(X.dtype, np.floating) and not np.all(np.isfinite(X)):
        raise DataError(f"{name} contains NaN or Inf")
    return X


def check_q7(X, name: str = "X") -> np.ndarray:
    X = check_windows(X, name=name)
    if X.dtype != np.int8:
        raise DataError(f"{name} must hold int8 Q7 codes, got {X.dtype}")
    return X


class Q7Preprocessor(TransformerMixin, BaseEstimator):
    """Zero-pad channels, per-channel streaming z-score, Q7 quantization."""

    def __init__(self, target_channels=None, sigma_range=Q7_SIGMA_RANGE):
        self.target_channels = target_channels
        self.sigma_range = sigma_range

    def fit(self, X, y=None):
        X = check_windows(X, dtype=np.float64)
        self.n_channels_in_ = X.shape[1]
        self.window_len_ = X.shape[2]
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_windows(X, dtype=np.float64)
        if X.shape[1] != self.n_channels_in_:
            raise DataError(f"expected {self.n_channels_in_} channels, got {X.shape[1]}")
        return signal_to_q7(X, self.target_channels, self.sigma_range)


class PositionalEncoder(TransformerMixin, BaseEstimator):
    """Append 2 * n_freqs sinusoidal Q7 channels from precomputed tables."""

    def __init__(self, n_freqs=8, alpha=0.1):
        self.n_freqs = n_freqs
        self.alpha = alpha

    def fit(self, X, y=None):
        X = check_windows(X)
        self.table_ = pe_table(X.shape[2], self.n_freqs, self.alpha)
        return self

    def transform(self, X):
        check_is_fitted(self)
        return encode_positions(self.table_, check_windows(X))


class PhysioLiteClassifier(ClassifierMixin, BaseEstimator):
    """Multi-scale convolutional classifier for ECG/EMG windows.

    ``y`` may be class labels (single-label) or an (n, n_classes) 0/1
    matrix (multi-label).  A fitted ``teacher`` classifier turns training
    into distillation with strength ``alpha_kd``.
    """

    def __init__(self, kernel_set=(3, 5, 7), stem_channels=32, branch_channels=64, mix_channels=128,
                 embed_dim=256, depth=3, expansion_ratio=2, n_freqs=8, pe_alpha=0.1, use_positional=True,
                 input_kind="raw", epochs=30, warmup_epochs=5, batch_size=16, lr=1e-3, weight_decay=1e-3,
                 loss_kind=None, f1_reg_weight=0.1, teacher=None, alpha_kd=0.3, temperature=2.0,
                 threshold=0.5, random_state=0):
        self.kernel_set = kernel_set
        self.stem_channels = stem_channels
        self.branch_channels = branch_channels
        self.mix_channels = mix_channels
        self.embed_dim = embed_dim
        self.depth = depth
        self.expansion_ratio = expansion_ratio
        self.n_freqs = n_freqs
        self.pe_alpha = pe_alpha
        self.use_positional = use_positional
        self.input_kind = input_kind
        self.epochs = epochs
        self.warmup_epochs = warmup_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.loss_kind = loss_kind
        self.f1_reg_weight = f1_reg_weight
        self.teacher = teacher
        self.alpha_kd = alpha_kd
        self.temperature = temperature
        self.threshold = threshold
        self.random_state = random_state

    def _encode_targets(self, y):
        y = np.asarray(y)
        if y.ndim == 2:
            self.classes_ = np.arange(y.shape[1])
            self.task_kind_ = "multi-label"
            return y.astype(np.int64)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise DataError("need at least two classes")
        self.task_kind_ = "single-label"
        return encoded

    def _signal_channels(self, n_channels: int) -> int:
        if self.input_kind == "raw":
            return n_channels
        if self.input_kind != "q7":
            raise DataError(f"input_kind must be 'raw' or 'q7', got {self.input_kind!r}")
        return n_channels - (2 * self.n_freqs if self.use_positional else 0)

    def _float_inputs(self, X):
        if self.input_kind == "raw":
            X = check_windows(X, dtype=np.float64)
            return dequantize_q7(model_inputs(X, self.config_)).astype(np.float32)
        return dequantize_q7(check_q7(X)).astype(np.float32)

    def _q7_inputs(self, X):
        if self.input_kind == "raw":
            return model_inputs(check_windows(X, dtype=np.float64), self.config_)
        return check_q7(X)

    def fit(self, X, y):
        X = check_windows(X)
        targets = self._encode_targets(y)
        if len(targets) != len(X):
            raise DataError(f"{len(X)} windows but {len(targets)} targets")
        self.config_ = ModelConfig(
            signal_channels=self._signal_channels(X.shape[1]), n_freqs=self.n_freqs, pe_alpha=self.pe_alpha,
            kernel_set=tuple(self.kernel_set), stem_channels=self.stem_channels,
            branch_channels=self.branch_channels, mix_channels=self.mix_channels, embed_dim=self.embed_dim,
            depth=self.depth, expansion_ratio=self.expansion_ratio, n_classes=len(self.classes_),
            task_kind=self.task_kind_, window_len=X.shape[2], use_positional=self.use_positional,
            seed=self.random_state)
        train_cfg = TrainConfig(alpha_kd=self.alpha_kd, temperature=self.temperature, lr_max=self.lr,
                                weight_decay=self.weight_decay, epochs=self.epochs,
                                warmup_epochs=min(self.warmup_epochs, self.epochs), batch_size=self.batch_size,
                                seed=self.random_state, f1_reg_weight=self.f1_reg_weight, loss_kind=self.loss_kind)
        teacher_model, teacher_X = None, None
        if self.teacher is not None:
            check_is_fitted(self.teacher)
            teacher_model = self.teacher.model_
            teacher_X = self.teacher._float_inputs(X)
        self.model_, self.history_ = fit_inputs(build_model(self.config_), self._float_inputs(X), targets,
                                                self.task_kind_, train_cfg, teacher_model, teacher_X)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        return predict_logits(self.model_, self._float_inputs(X))

    def predict_proba(self, X):
        z = self.decision_function(X)
        return softmax(z) if self.task_kind_ == "single-label" else sigmoid(z)

    def predict(self, X):
        z = self.decision_function(X)
        if self.task_kind_ == "multi-label":
            return (sigmoid(z) >= self.threshold).astype(np.int64)
        return self.classes_[z.argmax(axis=1)]

    def quantize(self, X_calibration):
        """Post-training int8 quantization calibrated on ``X_calibration``."""
        check_is_fitted(self)
        self.qmodel_ = calibrate_and_quantize(self.model_, self._q7_inputs(X_calibration))
        return self.qmodel_

    def predict_int8(self, X):
        check_is_fitted(self, "qmodel_")
        z = infer_int8(self.qmodel_, self._q7_inputs(X))
        z = np.atleast_2d(z)
        if self.task_kind_ == "multi-label":
            return (sigmoid(z) >= self.threshold).astype(np.int64)
        return self.classes_[z.argmax(axis=1)]
