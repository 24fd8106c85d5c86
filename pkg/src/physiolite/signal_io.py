"""Signal containers, file formats, windowing and synthetic datasets.

Two on-disk formats are supported:

* ``phsig`` binary -- ``PHSG`` magic, u16 version (1), u32 channels,
  u64 samples per channel, f64 sample rate, then little-endian float32
  samples in channel-major order.
* CSV -- one column per channel, one row per time step, optional single
  header row.  CSV carries no sample rate, so callers supply it.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import ConfigError, DataError

PHSG_MAGIC = b"PHSG"
PHSG_VERSION = 1
_PHSG_HEADER = struct.Struct("<4sHIQd")


def _as_channel_major(data, name: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DataError(f"{name}: expected a (channels, samples) array, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise DataError(f"{name}: at least one channel required")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name}: non-finite sample")
    return arr


@dataclass(frozen=True)
class MultiChannelSignal:
    """A raw recording: ``data`` has shape (channels, samples)."""

    data: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        arr = _as_channel_major(self.data, "MultiChannelSignal")
        if not self.sample_rate_hz > 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples_per_channel(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class SignalWindow:
    """Fixed-length slice of a signal, shape (channels, window_len)."""

    data: np.ndarray
    sample_rate_hz: float
    offset: int = 0

    def __post_init__(self):
        arr = _as_channel_major(self.data, "SignalWindow")
        if not self.sample_rate_hz > 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate_hz}")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "sample_rate_hz", float(self.sample_rate_hz))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def window_len(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class WindowSpec:
    window_len: int
    step: int
    drop_last_partial: bool = True

    def __post_init__(self):
        if not 1 <= self.step <= self.window_len:
            raise ConfigError(f"need 1 <= step <= window_len, got step={self.step}, window_len={self.window_len}")


# ---------------------------------------------------------------------------
# file formats


def write_signal(signal: MultiChannelSignal, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or _format_from_suffix(path)
    if fmt == "phsig":
        with open(path, "wb") as fh:
            fh.write(_PHSG_HEADER.pack(PHSG_MAGIC, PHSG_VERSION, signal.channels,
                                       signal.samples_per_channel, signal.sample_rate_hz))
            fh.write(signal.data.astype("<f4").tobytes(order="C"))
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"ch{i}" for i in range(signal.channels)])
            for row in signal.data.T:
                writer.writerow([repr(float(v)) for v in row])
    else:
        raise ConfigError(f"unknown signal format {fmt!r}")


def read_signal(path, format: str | None = None, sample_rate_hz: float | None = None) -> MultiChannelSignal:
    """Load a signal from ``path``.

    ``format`` is ``"phsig"`` or ``"csv"``; when omitted it is inferred from
    the file suffix.  ``sample_rate_hz`` is required for CSV input.
    """
    path = Path(path)
    fmt = format or _format_from_suffix(path)
    if fmt == "phsig":
        return _read_phsig(path.read_bytes())
    if fmt == "csv":
        if sample_rate_hz is None:
            raise ConfigError("CSV input needs an explicit sample rate")
        return _read_csv(path, sample_rate_hz)
    raise ConfigError(f"unknown signal format {fmt!r}")


def _format_from_suffix(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix in (".phsg", ".phsig", ".bin"):
        return "phsig"
    if suffix in (".csv", ".txt"):
        return "csv"
    raise ConfigError(f"cannot infer signal format from {path.name!r}; pass format explicitly")


def _read_phsig(raw: bytes) -> MultiChannelSignal:
    if len(raw) < _PHSG_HEADER.size:
        raise DataError("phsig: truncated header")
    magic, version, channels, samples, rate = _PHSG_HEADER.unpack_from(raw, 0)
    if magic != PHSG_MAGIC:
        raise DataError(f"phsig: bad magic {magic!r}")
    if version != PHSG_VERSION:
        raise DataError(f"phsig: unsupported version {version}")
    if channels < 1:
        raise DataError("phsig: zero channels in header")
    payload = raw[_PHSG_HEADER.size:]
    expected = channels * samples * 4
    if len(payload) != expected:
        raise DataError(
            f"phsig: header declares {channels}x{samples} samples ({expected} bytes), payload has {len(payload)} bytes"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(channels, samples)
    return MultiChannelSignal(data.astype(np.float64), rate)


def _read_csv(path: Path, sample_rate_hz: float) -> MultiChannelSignal:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path.name}: empty CSV")
    try:
        [float(c) for c in rows[0]]
    except ValueError:
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path.name}: CSV has a header but no samples")
    width = len(rows[0])
    values = []
    for lineno, row in enumerate(rows, start=1):
        if len(row) != width:
            raise DataError(f"{path.name}: row {lineno} has {len(row)} columns, expected {width}")
        try:
            values.append([float(c) for c in row])
        except ValueError as exc:
            raise DataError(f"{path.name}: row {lineno}: {exc}") from None
    return MultiChannelSignal(np.array(values).T, sample_rate_hz)


# ---------------------------------------------------------------------------
# windowing


def make_windows(signal: MultiChannelSignal, spec: WindowSpec) -> list[SignalWindow]:
    """Slice ``signal`` into windows starting at multiples of ``spec.step``.

    With ``drop_last_partial=False`` a trailing partial window is kept and
    zero-padded to full length.
    """
    n = signal.samples_per_channel
    if n < spec.window_len:
        raise DataError(f"signal has {n} samples, shorter than window_len={spec.window_len}")
    count = (n - spec.window_len) // spec.step + 1
    windows = [
        SignalWindow(signal.data[:, i * spec.step:i * spec.step + spec.window_len], signal.sample_rate_hz, i * spec.step)
        for i in range(count)
    ]
    tail_start = count * spec.step
    if not spec.drop_last_partial and tail_start < n and tail_start + spec.window_len > n:
        padded = np.zeros((signal.channels, spec.window_len))
        padded[:, :n - tail_start] = signal.data[:, tail_start:]
        windows.append(SignalWindow(padded, signal.sample_rate_hz, tail_start))
    return windows


# ---------------------------------------------------------------------------
# labelled datasets


@dataclass(frozen=True)
class LabeledDataset:
    """Windows with targets.

    ``labels`` is an int array of class indices for ``single-label`` tasks
    and an (n, n_classes) 0/1 array for ``multi-label`` tasks.
    """

    windows: tuple
    labels: np.ndarray
    n_classes: int
    task_kind: str = "single-label"

    def __post_init__(self):
        object.__setattr__(self, "windows", tuple(self.windows))
        if self.task_kind not in ("single-label", "multi-label"):
            raise ConfigError(f"unknown task_kind {self.task_kind!r}")
        labels = np.asarray(self.labels)
        if len(labels) != len(self.windows):
            raise DataError(f"{len(self.windows)} windows but {len(labels)} labels")
        if self.task_kind == "single-label":
            labels = labels.astype(np.int64)
            if labels.ndim != 1 or (labels.size and (labels.min() < 0 or labels.max() >= self.n_classes)):
                raise DataError("single-label targets must be indices in [0, n_classes)")
        else:
            labels = labels.astype(np.int64)
            if labels.ndim != 2 or labels.shape[1] != self.n_classes:
                raise DataError("multi-label targets must have shape (n, n_classes)")
            if np.any((labels != 0) & (labels != 1)):
                raise DataError("multi-label targets must be 0/1")
        labels.setflags(write=False)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.windows)

    @property
    def X(self) -> np.ndarray:
        """All windows stacked as (n, channels, window_len)."""
        return np.stack([w.data for w in self.windows])

    @property
    def sample_rate_hz(self) -> float:
        return self.windows[0].sample_rate_hz

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset([self.windows[i] for i in idx], self.labels[idx], self.n_classes, self.task_kind)

    @classmethod
    def from_arrays(cls, X, y, n_classes: int, sample_rate_hz: float, task_kind: str = "single-label"):
        X = np.asarray(X, dtype=np.float64)
        return cls([SignalWindow(x, sample_rate_hz) for x in X], y, n_classes, task_kind)

    def save(self, path) -> None:
        np.savez(path, X=self.X, y=self.labels, n_classes=self.n_classes,
                 task_kind=self.task_kind, sample_rate_hz=self.sample_rate_hz)

    @classmethod
    def load(cls, path) -> "LabeledDataset":
        try:
            with np.load(path, allow_pickle=False) as z:
                return cls.from_arrays(z["X"], z["y"], int(z["n_classes"]), float(z["sample_rate_hz"]),
                                       str(z["task_kind"]))
        except (KeyError, OSError, ValueError) as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"cannot load dataset {path}: {exc}") from None


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class Band:
    center_hz: float
    bandwidth_hz: float
    amplitude: float = 1.0


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic biosignal-like dataset.

    Spectral mode: class ``c`` is band-limited noise in ``bands[c]`` on every
    channel.  Order-dependent mode: every window holds one burst from
    ``bands[0]`` and one from ``bands[1]``; the class only decides which
    time slots they occupy, so class spectra match.
    """

    n_classes: int = 3
    channels: int = 4
    window_len: int = 256
    sample_rate_hz: float = 200.0
    bands: tuple = (Band(8.0, 4.0), Band(25.0, 6.0), Band(50.0, 10.0))
    noise_std: float = 0.5
    order_dependent: bool = False
    n_windows: int = 300
    seed: int = 0
    qrs_pulses: bool = False
    multi_label: bool = False

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        nyquist = self.sample_rate_hz / 2
        for b in self.bands:
            if b.center_hz + b.bandwidth_hz / 2 >= nyquist or b.center_hz - b.bandwidth_hz / 2 <= 0:
                raise ConfigError(f"band {b} must lie strictly inside (0, {nyquist}) Hz")
        needed = 2 if self.order_dependent else self.n_classes
        if len(self.bands) < needed:
            raise ConfigError(f"need at least {needed} band descriptors, got {len(self.bands)}")
        if self.order_dependent and self.multi_label:
            raise ConfigError("order-dependent datasets are single-label")


def _band_noise(rng: np.random.Generator, n: int, fs: float, band: Band) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spectrum[np.abs(freqs - band.center_hz) > band.bandwidth_hz / 2] = 0.0
    x = np.fft.irfft(spectrum, n)
    rms = np.sqrt(np.mean(x ** 2))
    return band.amplitude * x / rms if rms > 0 else x


def _qrs_train(rng: np.random.Generator, n: int, fs: float) -> np.ndarray:
    # 1.2 Hz triangular pulses, 40 ms wide, random phase; class independent
    period = fs / 1.2
    half = max(1, int(round(0.02 * fs)))
    out = np.zeros(n)
    t = rng.uniform(0, period)
    while t < n + half:
        centre = int(round(t))
        for i in range(centre - half, centre + half + 1):
            if 0 <= i < n:
                out[i] = max(out[i], 1.0 - abs(i - centre) / half)
        t += period
    return out


def _slot_pairs(n_classes: int) -> tuple[int, list[tuple[int, int]]]:
    slots = 2
    while slots * (slots - 1) < n_classes:
        slots += 1
    pairs = [(i, j) for i in range(slots) for j in range(slots) if i != j]
    return slots, pairs[:n_classes]


def gen_synthetic(spec: SyntheticSpec) -> LabeledDataset:
    """Generate a deterministic, class-balanced dataset from ``spec``."""
    rng = np.random.default_rng(spec.seed)
    n, T, fs = spec.n_windows, spec.window_len, spec.sample_rate_hz
    if spec.multi_label:
        labels = rng.integers(0, 2, size=(n, spec.n_classes))
        empty = labels.sum(axis=1) == 0
        labels[empty, rng.integers(0, spec.n_classes, size=int(empty.sum()))] = 1
    else:
        labels = rng.permutation(np.arange(n) % spec.n_classes)

    if spec.order_dependent:
        slots, pairs = _slot_pairs(spec.n_classes)
        slot_len = T // slots
        taper = np.hanning(slot_len)

    X = np.empty((n, spec.channels, T))
    for i in range(n):
        for ch in range(spec.channels):
            x = spec.noise_std * rng.standard_normal(T)
            if spec.order_dependent:
                for band, slot in zip(spec.bands[:2], pairs[labels[i]]):
                    burst = _band_noise(rng, slot_len, fs, band) * taper
                    x[slot * slot_len:(slot + 1) * slot_len] += burst
            elif spec.multi_label:
                for c in np.flatnonzero(labels[i]):
                    x += _band_noise(rng, T, fs, spec.bands[c])
            else:
                x += _band_noise(rng, T, fs, spec.bands[labels[i]])
            if spec.qrs_pulses:
                x += _qrs_train(rng, T, fs)
            X[i, ch] = x
    task = "multi-label" if spec.multi_label else "single-label"
    return LabeledDataset.from_arrays(X, labels, spec.n_classes, fs, task)


def standard_spectral_spec(seed: int = 0, **overrides) -> SyntheticSpec:
    """The 3-class spectral benchmark used throughout the test-suite."""
    kw = dict(n_classes=3, channels=4, window_len=256, sample_rate_hz=200.0, noise_std=0.5,
              n_windows=300, seed=seed)
    kw.update(overrides)
    return SyntheticSpec(**kw)


def order_dependent_spec(seed: int = 0, **overrides) -> SyntheticSpec:
    """3-class benchmark whose classes differ only in burst ordering."""
    kw = dict(n_classes=3, channels=4, window_len=256, sample_rate_hz=200.0, noise_std=0.3,
              bands=(Band(10.0, 4.0), Band(40.0, 8.0)), order_dependent=True, n_windows=300, seed=seed)
    kw.update(overrides)
    return SyntheticSpec(**kw)


def stack_windows(windows: Sequence[SignalWindow]) -> np.ndarray:
    return np.stack([w.data for w in windows])
