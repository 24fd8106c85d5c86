"""PHLW weight files.

Layout (little-endian)::

    "PHLW" | u16 version=1 | u16 flags (bit0 = quantized)
    u32 n_words | u32 x n_words          config block
    u32 n_tensors
    per tensor: u16 name_len | name | u8 dtype (0 f32, 1 i8, 2 i32) | u8 rank
                | u32 x rank dims | f64 scale | i32 zero_point | raw data
    u32 CRC32 of every preceding byte

Config words, in order: signal_channels, n_freqs, pe_alpha in millionths,
stem_channels, branch_channels, mix_channels, embed_dim, depth,
expansion_ratio, n_classes, task_kind (0 single / 1 multi), window_len,
use_positional, branch_stride, seed, n_kernels, kernels...

Activation quantization parameters of an int8 model are stored as empty
``act.<name>`` tensors that only carry scale and zero point.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .exceptions import DataError
from .model import Model, ModelConfig, QuantizedModel, layer_sources
from .nn import QuantParams

MAGIC = b"PHLW"
VERSION = 1
FLAG_QUANTIZED = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("i1"), 2: np.dtype("<i4")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.int8): 1, np.dtype(np.int32): 2}
_TASKS = ("single-label", "multi-label")


def _config_words(cfg: ModelConfig) -> list[int]:
    return [cfg.signal_channels, cfg.n_freqs, int(round(cfg.pe_alpha * 1e6)), cfg.stem_channels,
            cfg.branch_channels, cfg.mix_channels, cfg.embed_dim, cfg.depth, cfg.expansion_ratio,
            cfg.n_classes, _TASKS.index(cfg.task_kind), cfg.window_len, int(cfg.use_positional),
            cfg.branch_stride, cfg.seed, len(cfg.kernel_set), *cfg.kernel_set]


def _config_from_words(w: list[int]) -> ModelConfig:
    if len(w) < 16 or len(w) != 16 + w[15]:
        raise DataError("PHLW: malformed config block")
    return ModelConfig(signal_channels=w[0], n_freqs=w[1], pe_alpha=w[2] / 1e6, stem_channels=w[3],
                       branch_channels=w[4], mix_channels=w[5], embed_dim=w[6], depth=w[7],
                       expansion_ratio=w[8], n_classes=w[9], task_kind=_TASKS[w[10]], window_len=w[11],
                       use_positional=bool(w[12]), branch_stride=w[13], seed=w[14], kernel_set=tuple(w[16:]))


def _tensor_entries(obj):
    if isinstance(obj, Model):
        for name, arr in obj.params.items():
            yield name, np.asarray(arr, dtype=np.float32), QuantParams(1.0, 0)
    else:
        for name, arr in obj.weights.items():
            yield name, arr, obj.weight_qp[name]
        sources = {layer: src for layer, src, _ in layer_sources(obj.config)}
        for name, arr in obj.biases.items():
            layer = name.rsplit(".", 1)[0]
            scale = obj.weight_qp[f"{layer}.weight"].scale * obj.act_qp[sources[layer]].scale
            yield name, arr, QuantParams(scale, 0)
        for name, qp in obj.act_qp.items():
            yield f"act.{name}", np.zeros(0, dtype=np.int8), qp


def to_bytes(obj) -> bytes:
    quantized = isinstance(obj, QuantizedModel)
    words = _config_words(obj.config)
    entries = list(_tensor_entries(obj))
    parts = [MAGIC, struct.pack("<HH", VERSION, FLAG_QUANTIZED if quantized else 0),
             struct.pack(f"<I{len(words)}I", len(words), *words), struct.pack("<I", len(entries))]
    for name, arr, qp in entries:
        arr = np.asarray(arr)
        raw_name = name.encode()
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<BB{arr.ndim}I", _CODES[arr.dtype], arr.ndim, *arr.shape))
        parts.append(struct.pack("<di", qp.scale, qp.zero_point))
        parts.append(arr.astype(_DTYPES[_CODES[arr.dtype]]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(raw: bytes):
    if len(raw) < 12:
        raise DataError("PHLW: truncated file")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if body[:4] != MAGIC:
        raise DataError(f"PHLW: bad magic {body[:4]!r}")
    if zlib.crc32(body) != crc:
        raise DataError("PHLW: checksum mismatch")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise DataError("PHLW: truncated payload")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    version, flags = take("<HH")
    if version != VERSION:
        raise DataError(f"PHLW: unsupported version {version}")
    (n_words,) = take("<I")
    cfg = _config_from_words(list(take(f"<{n_words}I")))
    (n_tensors,) = take("<I")
    tensors = {}
    for _ in range(n_tensors):
        (name_len,) = take("<H")
        name = bytes(take(f"<{name_len}s")[0]).decode()
        code, rank = take("<BB")
        if code not in _DTYPES:
            raise DataError(f"PHLW: unknown dtype code {code}")
        dims = take(f"<{rank}I")
        scale, zp = take("<di")
        dt = _DTYPES[code]
        count = int(np.prod(dims)) if rank else 1
        nbytes = count * dt.itemsize
        if pos + nbytes > len(body):
            raise DataError("PHLW: truncated payload")
        arr = np.frombuffer(body, dtype=dt, count=count, offset=pos).reshape(dims).astype(dt.newbyteorder("="))
        pos += nbytes
        tensors[name] = (arr, scale, zp)
    if pos != len(body):
        raise DataError("PHLW: trailing bytes before checksum")

    if not flags & FLAG_QUANTIZED:
        return Model(cfg, {name: arr for name, (arr, _, _) in tensors.items()})
    weights, weight_qp, biases, act_qp = {}, {}, {}, {}
    for name, (arr, scale, zp) in tensors.items():
        if name.startswith("act."):
            act_qp[name[4:]] = QuantParams(scale, zp)
        elif name.endswith(".bias"):
            biases[name] = arr
        else:
            weights[name] = arr
            weight_qp[name] = QuantParams(scale, zp)
    return QuantizedModel(cfg, weights, weight_qp, biases, act_qp)


def save_weights(obj, path) -> None:
    Path(path).write_bytes(to_bytes(obj))


def load_weights(path):
    return from_bytes(Path(path).read_bytes())
