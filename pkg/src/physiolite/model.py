"""The PhysioLite network: float model, int8 twin and memory budgeting.

Layout::

    pointwise stem -> ReLU
    parallel branches, one per kernel size (stride 2, same padding) -> ReLU -> concat
    pointwise projection -> ReLU
    depth x inverted residual [expand -> ReLU -> depthwise k=3 -> ReLU -> project, + skip]
    pointwise embed -> ReLU -> global average pool -> dense head

Only the branches, the projection and the head carry biases, which keeps the
int32 bias table inside the 2 KB accelerator bias memory.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .exceptions import ConfigError, DataError
from .nn import ConvSpec, QuantParams, Q7_PARAMS
from .preprocess import dequantize_q7

log = logging.getLogger(__name__)

KB = 1024
WEIGHT_SRAM_BYTES = 442 * KB
DATA_SRAM_BYTES = 512 * KB
BIAS_SRAM_BYTES = 2 * KB
BIAS_BYTES_PER_VALUE = 4
DEPTHWISE_KERNEL = 3


@dataclass(frozen=True)
class ModelConfig:
    signal_channels: int = 16
    n_freqs: int = 12
    pe_alpha: float = 0.1
    kernel_set: tuple = (3, 5, 7)
    stem_channels: int = 32
    branch_channels: int = 64
    mix_channels: int = 128
    embed_dim: int = 256
    depth: int = 3
    expansion_ratio: int = 2
    n_classes: int = 5
    task_kind: str = "single-label"
    window_len: int = 2048
    use_positional: bool = True
    branch_stride: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kernel_set", tuple(int(k) for k in self.kernel_set))
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if not self.kernel_set or any(k < 1 or k % 2 == 0 for k in self.kernel_set):
            raise ConfigError(f"kernel_set must be non-empty odd sizes, got {self.kernel_set}")
        if len(set(self.kernel_set)) != len(self.kernel_set):
            raise ConfigError(f"duplicate kernel sizes in {self.kernel_set}")
        for name in ("signal_channels", "stem_channels", "branch_channels", "mix_channels", "embed_dim",
                     "expansion_ratio", "n_classes", "branch_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.use_positional and self.n_freqs < 1:
            raise ConfigError("n_freqs must be >= 1 when positional channels are used")
        if self.task_kind not in ("single-label", "multi-label"):
            raise ConfigError(f"unknown task_kind {self.task_kind!r}")
        if self.window_len < max(self.kernel_set):
            raise ConfigError("window_len shorter than the largest kernel")

    @property
    def pe_channels(self) -> int:
        return 2 * self.n_freqs if self.use_positional else 0

    @property
    def in_channels(self) -> int:
        return self.signal_channels + self.pe_channels

    @property
    def hidden_channels(self) -> int:
        return self.mix_channels * self.expansion_ratio

    @property
    def mixed_len(self) -> int:
        return (self.window_len - 1) // self.branch_stride + 1

    def to_dict(self) -> dict:
        return asdict(self)


def ecg_config(**overrides) -> ModelConfig:
    """12-lead, 2048-sample multi-label ECG preset with 12 positional frequencies."""
    kw = dict(signal_channels=12, n_freqs=12, window_len=2048, n_classes=5, task_kind="multi-label")
    kw.update(overrides)
    return ModelConfig(**kw)


def emg_config(**overrides) -> ModelConfig:
    """8-channel, 1024-sample single-label EMG preset with 8 positional frequencies."""
    kw = dict(signal_channels=8, n_freqs=8, window_len=1024, n_classes=6, task_kind="single-label")
    kw.update(overrides)
    return ModelConfig(**kw)


# ---------------------------------------------------------------------------
# layer table


@dataclass(frozen=True)
class ConvLayer:
    name: str
    spec: ConvSpec
    bias: bool
    relu: bool


def conv_layers(cfg: ModelConfig) -> list[ConvLayer]:
    """Every conv layer in execution order (branches listed consecutively)."""
    s, b, m, h = cfg.stem_channels, cfg.branch_channels, cfg.mix_channels, cfg.hidden_channels
    layers = [ConvLayer("stem", ConvSpec(cfg.in_channels, s, 1), False, True)]
    for k in cfg.kernel_set:
        layers.append(ConvLayer(f"branch{k}", ConvSpec(s, b, k, cfg.branch_stride, "same"), True, True))
    layers.append(ConvLayer("proj", ConvSpec(b * len(cfg.kernel_set), m, 1), True, True))
    for i in range(cfg.depth):
        layers += [
            ConvLayer(f"block{i}.expand", ConvSpec(m, h, 1), False, True),
            ConvLayer(f"block{i}.dw", ConvSpec(h, h, DEPTHWISE_KERNEL, 1, "same", groups=h), False, True),
            ConvLayer(f"block{i}.project", ConvSpec(h, m, 1), False, False),
        ]
    layers.append(ConvLayer("embed", ConvSpec(m, cfg.embed_dim, 1), False, True))
    return layers


def param_shapes(cfg: ModelConfig) -> dict:
    shapes = {}
    for layer in conv_layers(cfg):
        shapes[f"{layer.name}.weight"] = layer.spec.weight_shape
        if layer.bias:
            shapes[f"{layer.name}.bias"] = (layer.spec.out_channels,)
    shapes["head.weight"] = (cfg.n_classes, cfg.embed_dim)
    shapes["head.bias"] = (cfg.n_classes,)
    return shapes


def closed_form_param_count(cfg: ModelConfig) -> int:
    nk, ksum = len(cfg.kernel_set), sum(cfg.kernel_set)
    s, b, m, h, e = cfg.stem_channels, cfg.branch_channels, cfg.mix_channels, cfg.hidden_channels, cfg.embed_dim
    return (cfg.in_channels * s
            + s * b * ksum + nk * b
            + nk * b * m + m
            + cfg.depth * (2 * m * h + DEPTHWISE_KERNEL * h)
            + m * e
            + e * cfg.n_classes + cfg.n_classes)


# ---------------------------------------------------------------------------
# float model


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def forward(self, x, keep_cache: bool = False, record: dict | None = None):
        """Logits for an (N, C_in, T) batch.

        With ``keep_cache`` returns ``(logits, cache)`` for :meth:`backward`.
        ``record``, when given, receives the float activation at every
        quantization point (used for calibration).
        """
        cfg, p = self.config, self.params
        x = np.asarray(x, dtype=self.dtype)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.shape[1:] != (cfg.in_channels, cfg.window_len):
            raise DataError(f"input shape {x.shape[1:]} does not match model ({cfg.in_channels}, {cfg.window_len})")
        layers = {l.name: l for l in conv_layers(cfg)}
        cache = {}

        def conv(name, h):
            layer = layers[name]
            y, c = nn.conv1d_forward(h, p[f"{name}.weight"], p.get(f"{name}.bias"), layer.spec)
            cache[name] = c
            if layer.relu:
                y, cache[f"{name}.relu"] = nn.relu_forward(y)
            return y

        if record is not None:
            record["input"] = x
        h = conv("stem", x)
        if record is not None:
            record["stem"] = h
        stem_out = h
        h = np.concatenate([conv(f"branch{k}", stem_out) for k in cfg.kernel_set], axis=1)
        if record is not None:
            record["branches"] = h
        h = conv("proj", h)
        if record is not None:
            record["proj"] = h
        for i in range(cfg.depth):
            e = conv(f"block{i}.expand", h)
            d = conv(f"block{i}.dw", e)
            r = conv(f"block{i}.project", d)
            h = h + r
            if record is not None:
                record.update({f"block{i}.expand": e, f"block{i}.dw": d, f"block{i}.project": r, f"block{i}.out": h})
        h = conv("embed", h)
        pooled, length = nn.global_avg_pool_forward(h)
        cache["pool"] = length
        logits, cache["head"] = nn.dense_forward(pooled, p["head.weight"], p["head.bias"])
        if record is not None:
            record.update({"embed": h, "pool": pooled, "head": logits})
        if squeeze:
            logits = logits[0]
        return (logits, cache) if keep_cache else logits

    def backward(self, grad_logits, cache) -> dict:
        cfg = self.config
        layers = {l.name: l for l in conv_layers(cfg)}
        grads = {}

        def conv_back(name, g):
            layer = layers[name]
            if layer.relu:
                g = nn.relu_backward(g, cache[f"{name}.relu"])
            gx, gw, gb = nn.conv1d_backward(g, cache[name])
            grads[f"{name}.weight"] = gw
            if layer.bias:
                grads[f"{name}.bias"] = gb
            return gx

        g, grads["head.weight"], grads["head.bias"] = nn.dense_backward(np.atleast_2d(grad_logits), cache["head"])
        g = nn.global_avg_pool_backward(g, cache["pool"])
        g = conv_back("embed", g)
        for i in reversed(range(cfg.depth)):
            gr = conv_back(f"block{i}.project", g)
            gr = conv_back(f"block{i}.dw", gr)
            gr = conv_back(f"block{i}.expand", gr)
            g = g + gr
        g = conv_back("proj", g)
        b = cfg.branch_channels
        g_stem = None
        for j, k in enumerate(cfg.kernel_set):
            gk = conv_back(f"branch{k}", g[:, j * b:(j + 1) * b])
            g_stem = gk if g_stem is None else g_stem + gk
        conv_back("stem", g_stem)
        return {name: grads[name] for name in self.params}


def build_model(config: ModelConfig, dtype=np.float32) -> Model:
    """Kaiming-uniform fan-in init from ``config.seed``; biases start at zero."""
    rng = np.random.default_rng(config.seed)
    relu_layers = {l.name: l.relu for l in conv_layers(config)}
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = int(np.prod(shape[1:]))
        gain = math.sqrt(2.0) if relu_layers.get(name.rsplit(".", 1)[0], False) else 1.0
        bound = gain * math.sqrt(3.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    model = Model(config, params)
    n = count_params(model)
    if n > WEIGHT_SRAM_BYTES:
        log.warning("model has %d parameters; int8 weights exceed the %d-byte weight SRAM", n, WEIGHT_SRAM_BYTES)
    return model


def count_params(model) -> int:
    tensors = model.params if isinstance(model, Model) else {**model.weights, **model.biases}
    return int(sum(np.asarray(t).size for t in tensors.values()))


def infer_float(model: Model, augmented) -> np.ndarray:
    """Float logits.  Integer input is read as Q7 codes."""
    x = np.asarray(augmented)
    if np.issubdtype(x.dtype, np.integer):
        x = dequantize_q7(x)
    return model.forward(x)


# ---------------------------------------------------------------------------
# int8 model


@dataclass
class QuantizedModel:
    config: ModelConfig
    weights: dict                 # name.weight -> int8
    weight_qp: dict               # name.weight -> QuantParams
    biases: dict                  # name.bias -> int32
    act_qp: dict                  # activation name -> QuantParams

    def bias_for(self, layer: str):
        return self.biases.get(f"{layer}.bias")


# activations produced by each layer, and the activation each layer reads
def _act_flow(cfg: ModelConfig):
    flow = [("stem", "input", "stem")]
    flow += [(f"branch{k}", "stem", "branches") for k in cfg.kernel_set]
    flow.append(("proj", "branches", "proj"))
    prev = "proj"
    for i in range(cfg.depth):
        flow += [(f"block{i}.expand", prev, f"block{i}.expand"),
                 (f"block{i}.dw", f"block{i}.expand", f"block{i}.dw"),
                 (f"block{i}.project", f"block{i}.dw", f"block{i}.project")]
        prev = f"block{i}.out"
    flow.append(("embed", prev, "embed"))
    return flow


def layer_sources(cfg: ModelConfig):
    """(layer, input activation, output activation) for every weighted layer."""
    return _act_flow(cfg) + [("head", "pool", "head")]


def calibrate_and_quantize(model: Model, calibration_windows) -> QuantizedModel:
    """Post-training quantization.

    Weights: per-tensor symmetric int8.  Activations: per-tensor affine from
    the min/max seen over the calibration windows.  Biases: int32 at scale
    ``in_scale * weight_scale``.
    """
    x = np.asarray(calibration_windows)
    if x.ndim == 2:
        x = x[None]
    if x.shape[0] < 1:
        raise DataError("calibration needs at least one window")
    if np.issubdtype(x.dtype, np.integer):
        x = dequantize_q7(x)
    cfg = model.config
    lo, hi = {}, {}
    for start in range(0, len(x), 32):
        rec = {}
        model.forward(x[start:start + 32], record=rec)
        for name, v in rec.items():
            lo[name] = min(lo.get(name, np.inf), float(v.min()))
            hi[name] = max(hi.get(name, -np.inf), float(v.max()))
    act_qp = {name: nn.affine_activation_params(lo[name], hi[name]) for name in lo}
    act_qp["input"] = Q7_PARAMS

    weights, weight_qp, biases = {}, {}, {}
    for layer, src, _ in layer_sources(cfg):
        w = model.params[f"{layer}.weight"]
        qp = nn.symmetric_weight_params(w)
        weights[f"{layer}.weight"] = qp.quantize(w)
        weight_qp[f"{layer}.weight"] = qp
        b = model.params.get(f"{layer}.bias")
        bq = None
        if b is not None:
            bq = nn.quantize_bias(b, act_qp[src], qp)
            biases[f"{layer}.bias"] = bq
        nn.check_accumulator(weights[f"{layer}.weight"], act_qp[src], bq, layer)
    return QuantizedModel(cfg, weights, weight_qp, biases, act_qp)


def infer_int8(qmodel: QuantizedModel, q7_window, return_codes: bool = False):
    """Integer-only forward pass; only the head output is dequantized."""
    cfg, qp = qmodel.config, qmodel.act_qp
    x = np.asarray(q7_window)
    if x.dtype != np.int8:
        raise DataError(f"int8 inference expects Q7 int8 codes, got {x.dtype}")
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.shape[1:] != (cfg.in_channels, cfg.window_len):
        raise DataError(f"input shape {x.shape[1:]} does not match model ({cfg.in_channels}, {cfg.window_len})")
    layers = {l.name: l for l in conv_layers(cfg)}
    acts = {"input": x}
    for name, src, dst in _act_flow(cfg):
        layer = layers[name]
        key = f"{name}.weight"
        y = nn.conv1d_int8(acts[src], qmodel.weights[key], qmodel.bias_for(name), layer.spec,
                           qp[src], qmodel.weight_qp[key], qp[dst], relu=layer.relu)
        if dst == "branches":
            acts.setdefault("_branches", []).append(y)
            if len(acts["_branches"]) == len(cfg.kernel_set):
                acts["branches"] = np.concatenate(acts.pop("_branches"), axis=1)
            continue
        acts[dst] = y
        if name.endswith(".project"):
            i = name.split(".")[0]
            prev = "proj" if i == "block0" else f"block{int(i[5:]) - 1}.out"
            acts[f"{i}.out"] = nn.add_int8(acts[prev], qp[prev], y, qp[dst], qp[f"{i}.out"])
    pooled = nn.global_avg_pool_int8(acts["embed"], qp["embed"], qp["pool"])
    head = nn.dense_int8(pooled, qmodel.weights["head.weight"], qmodel.biases["head.bias"], qp["pool"],
                         qmodel.weight_qp["head.weight"], qp["head"])
    logits = qp["head"].dequantize(head)
    if squeeze:
        logits, head = logits[0], head[0]
    return (logits, head) if return_codes else logits


# ---------------------------------------------------------------------------
# budgeting


@dataclass(frozen=True)
class BudgetReport:
    param_count: int
    weight_bytes: int
    bias_bytes: int
    peak_activation_bytes: int
    peak_layer: str
    weight_limit: int = WEIGHT_SRAM_BYTES
    data_limit: int = DATA_SRAM_BYTES
    bias_limit: int = BIAS_SRAM_BYTES

    @property
    def weight_ok(self) -> bool:
        return self.weight_bytes <= self.weight_limit

    @property
    def bias_ok(self) -> bool:
        return self.bias_bytes <= self.bias_limit

    @property
    def data_ok(self) -> bool:
        return self.peak_activation_bytes <= self.data_limit

    @property
    def ok(self) -> bool:
        return self.weight_ok and self.bias_ok and self.data_ok

    def to_text(self) -> str:
        def row(label, used, limit, ok):
            return f"{label:<18}{used:>10} / {limit:<10} {100 * used / limit:6.1f}%  {'PASS' if ok else 'FAIL'}"
        return "\n".join([
            f"parameters        {self.param_count}",
            row("weight SRAM", self.weight_bytes, self.weight_limit, self.weight_ok),
            row("bias SRAM", self.bias_bytes, self.bias_limit, self.bias_ok),
            row("data SRAM", self.peak_activation_bytes, self.data_limit, self.data_ok),
            f"peak layer        {self.peak_layer}",
        ]) + "\n"


def activation_footprint(cfg: ModelConfig) -> list[tuple[str, int]]:
    """(layer, input + output int8 bytes) for one window."""
    T, L = cfg.window_len, cfg.mixed_len
    s, m, h, e = cfg.stem_channels, cfg.mix_channels, cfg.hidden_channels, cfg.embed_dim
    nb = cfg.branch_channels * len(cfg.kernel_set)
    rows = [("stem", (cfg.in_channels + s) * T),
            ("branches", s * T + nb * L),
            ("proj", (nb + m) * L)]
    for i in range(cfg.depth):
        rows += [(f"block{i}.expand", (m + h) * L), (f"block{i}.dw", 2 * h * L),
                 (f"block{i}.project", (h + m) * L)]
    rows += [("embed", (m + e) * L), ("pool", e * L + e), ("head", e + cfg.n_classes)]
    return rows


def budget_report(model) -> BudgetReport:
    """Byte counts derived from tensor shapes alone."""
    cfg = model.config
    shapes = param_shapes(cfg)
    weight_elems = sum(int(np.prod(s)) for n, s in shapes.items() if n.endswith(".weight"))
    bias_elems = sum(int(np.prod(s)) for n, s in shapes.items() if n.endswith(".bias"))
    peak_layer, peak = max(activation_footprint(cfg), key=lambda r: r[1])
    return BudgetReport(weight_elems + bias_elems, weight_elems, BIAS_BYTES_PER_VALUE * bias_elems, peak, peak_layer)


# ---------------------------------------------------------------------------
# tile packing


def tile_pack(q, tile_width: int) -> bytes:
    """Re-lay a (C, L) int8 tensor as tile-major blocks.

    Output order is tile 0 of every channel, then tile 1 of every channel,
    and so on; each block holds ``tile_width`` samples and the last tile is
    zero-padded.
    """
    if tile_width < 1:
        raise ConfigError("tile_width must be >= 1")
    q = np.asarray(q, dtype=np.int8)
    c, length = q.shape
    n_tiles = -(-length // tile_width)
    padded = np.zeros((c, n_tiles * tile_width), dtype=np.int8)
    padded[:, :length] = q
    return padded.reshape(c, n_tiles, tile_width).transpose(1, 0, 2).tobytes()


def tile_unpack(packed: bytes, channels: int, length: int, tile_width: int) -> np.ndarray:
    n_tiles = -(-length // tile_width)
    arr = np.frombuffer(packed, dtype=np.int8)
    if arr.size != n_tiles * channels * tile_width:
        raise DataError(f"packed buffer has {arr.size} bytes, expected {n_tiles * channels * tile_width}")
    return arr.reshape(n_tiles, channels, tile_width).transpose(1, 0, 2).reshape(channels, -1)[:, :length].copy()


def with_positional(cfg: ModelConfig, enabled: bool) -> ModelConfig:
    return replace(cfg, use_positional=enabled)
