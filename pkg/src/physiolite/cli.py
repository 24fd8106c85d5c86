"""``physiolite`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal error.  Every command that writes artifacts writes them
atomically and leaves a ``<artifact>.manifest.json`` next to each one.
"""

from __future__ import annotations

import argparse
import hashlib
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .conditioning import condition_ecg, condition_emg
from .exceptions import ConfigError, DataError
from .metrics import sigmoid, softmax
from .model import (ModelConfig, QuantizedModel, budget_report, build_model, calibrate_and_quantize, ecg_config,
                    emg_config, infer_float, infer_int8)
from .pipeline import Q7_SIGMA_RANGE, model_inputs, pe_table
from .posenc import encode_positions
from .preprocess import dequantize_q7, fit_length, preprocess_window, resample_linear
from .profiling import emit_report, profile_pipeline
from .signal_io import (LabeledDataset, SignalWindow, WindowSpec, gen_synthetic, make_windows,
                        order_dependent_spec, read_signal, standard_spectral_spec, write_signal)
from .training import TrainConfig, distill, format_history, train
from .weights_io import load_weights, to_bytes

log = logging.getLogger("physiolite")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# artifacts


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


class RunContext:
    """Collects a command's artifacts in memory and commits them together."""

    def __init__(self, args, config: dict | None = None):
        self.command = args.command
        self.argv = list(getattr(args, "_argv", []))
        self.seed = getattr(args, "seed", None)
        self.inputs = [str(p) for p in getattr(args, "_inputs", [])]
        self.config = config or {}
        self.pending: list[tuple[Path, bytes]] = []

    def add(self, path, data: bytes) -> None:
        self.pending.append((Path(path), data))

    def manifest(self, path: Path, data: bytes) -> dict:
        return {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seed": self.seed,
            "inputs": {p: _sha256(Path(p).read_bytes()) if Path(p).is_file() else None for p in self.inputs},
            "artifacts": {str(path): _sha256(data)},
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "version": __version__,
        }

    def commit(self) -> None:
        for path, data in self.pending:
            _atomic_write(path, data)
            meta = json.dumps(self.manifest(path, data), indent=2, sort_keys=True, default=str)
            _atomic_write(path.with_name(path.name + ".manifest.json"), (meta + "\n").encode())
        self.pending.clear()


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def _npz_bytes(dataset: LabeledDataset) -> bytes:
    buf = io.BytesIO()
    dataset.save(buf)
    return buf.getvalue()


def _signal_bytes(signal, path: Path) -> bytes:
    with tempfile.TemporaryDirectory() as d:
        tmp = Path(d) / path.name
        write_signal(signal, tmp)
        return tmp.read_bytes()


def _load_npy(path) -> np.ndarray:
    try:
        return np.load(path, allow_pickle=False)
    except ValueError as exc:
        raise DataError(f"cannot read array {path}: {exc}") from None


# ---------------------------------------------------------------------------
# shared option groups


def _kernels(text: str) -> tuple:
    try:
        ks = tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad kernel list {text!r}") from None
    if not ks:
        raise argparse.ArgumentTypeError("empty kernel list")
    return ks


def _floats(text: str) -> tuple:
    try:
        return tuple(float(a) for a in text.split(",") if a.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--preset", choices=("default", "ecg", "emg"), default="default",
                   help="start from a preset; channels, length and classes always follow the data")
    g.add_argument("--freqs", type=int, default=None, help="positional frequencies F (2F extra channels)")
    g.add_argument("--alpha-pe", type=float, default=0.1, help="positional encoding amplitude")
    g.add_argument("--kernels", type=_kernels, default=(3, 5, 7), help="branch kernel sizes, e.g. 3,5,7")
    g.add_argument("--no-pe", action="store_true", help="disable positional channels")
    g.add_argument("--stem", type=int, default=32)
    g.add_argument("--branch", type=int, default=64)
    g.add_argument("--mix", type=int, default=128)
    g.add_argument("--embed", type=int, default=256)
    g.add_argument("--depth", type=int, default=3)


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--warmup", type=int, default=5)
    g.add_argument("--batch", type=int, default=16)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--weight-decay", type=float, default=1e-3)
    g.add_argument("--loss", choices=("ce", "bce", "ce+softf1"), default=None)
    g.add_argument("--f1-weight", type=float, default=0.1, help="soft-F1 regulariser weight")


def _model_config(args, dataset: LabeledDataset) -> ModelConfig:
    factory = {"default": ModelConfig, "ecg": ecg_config, "emg": emg_config}[args.preset]
    kw = dict(signal_channels=dataset.windows[0].channels, window_len=dataset.windows[0].window_len,
              n_classes=dataset.n_classes, task_kind=dataset.task_kind, pe_alpha=args.alpha_pe,
              kernel_set=args.kernels, use_positional=not args.no_pe, stem_channels=args.stem,
              branch_channels=args.branch, mix_channels=args.mix, embed_dim=args.embed, depth=args.depth,
              seed=args.seed)
    if args.freqs is not None:
        kw["n_freqs"] = args.freqs
    return factory(**kw)


def _train_config(args, **extra) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, warmup_epochs=min(args.warmup, args.epochs), batch_size=args.batch,
                       lr_max=args.lr, weight_decay=args.weight_decay, loss_kind=args.loss,
                       f1_reg_weight=args.f1_weight, seed=args.seed, **extra)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args, out):
    factory = standard_spectral_spec if args.kind == "spectral" else order_dependent_spec
    overrides = {k: v for k, v in (("n_windows", args.n_windows), ("window_len", args.window_len),
                                   ("sample_rate_hz", args.rate), ("channels", args.channels))
                 if v is not None}
    spec = factory(seed=args.seed, **overrides)
    dataset = gen_synthetic(spec)
    ctx = RunContext(args, {"kind": args.kind, "spec": repr(spec)})
    ctx.add(args.out, _npz_bytes(dataset))
    ctx.commit()
    print(f"wrote {len(dataset)} windows ({dataset.n_classes} classes) to {args.out}", file=out)


def cmd_condition(args, out):
    sig = read_signal(args.input, sample_rate_hz=args.rate)
    result = condition_ecg(sig) if args.kind == "ecg" else condition_emg(sig)
    ctx = RunContext(args, {"kind": args.kind})
    ctx.add(args.out, _signal_bytes(result, Path(args.out)))
    ctx.commit()
    print(f"conditioned {sig.channels}x{sig.samples_per_channel} {args.kind} signal -> {args.out}", file=out)


def cmd_preprocess(args, out):
    sig = read_signal(args.input, sample_rate_hz=args.rate)
    step = args.step if args.step is not None else args.window_len
    windows = make_windows(sig, WindowSpec(args.window_len, step))
    if not windows:
        raise DataError(f"signal of {sig.samples_per_channel} samples is shorter than one window")
    codes = [preprocess_window(w, args.target_rate, args.channels, args.window_len, Q7_SIGMA_RANGE)[0]
             for w in windows]
    arr = np.stack(codes).astype(np.int8)
    ctx = RunContext(args, {"window_len": args.window_len, "step": step, "target_rate": args.target_rate,
                            "channels": args.channels, "sigma_range": Q7_SIGMA_RANGE})
    ctx.add(args.out, _npy_bytes(arr))
    ctx.commit()
    print(f"wrote Q7 windows {arr.shape} to {args.out}", file=out)


def cmd_encode(args, out):
    if args.dump_table:
        if args.window_len is None:
            raise ConfigError("--dump-table needs --window-len")
        out.write(pe_table(args.window_len, args.freqs, args.alpha_pe).dump())
        return
    if args.input is None or args.out is None:
        raise ConfigError("encode needs --input and --out (or --dump-table)")
    q = _load_npy(args.input)
    if q.dtype != np.int8:
        raise DataError(f"{args.input} holds {q.dtype}, expected int8 Q7 codes")
    arr = encode_positions(pe_table(q.shape[-1], args.freqs, args.alpha_pe), q)
    ctx = RunContext(args, {"freqs": args.freqs, "alpha_pe": args.alpha_pe})
    ctx.add(args.out, _npy_bytes(arr))
    ctx.commit()
    print(f"wrote encoded windows {arr.shape} to {args.out}", file=out)


def _print_history(history, out):
    out.write(format_history(history))
    if history:
        last = history[-1]
        print(f"final val macro-F1 {last.val_macro_f1:.4f}", file=out)


def cmd_train(args, out):
    dataset = LabeledDataset.load(args.data)
    mcfg = _model_config(args, dataset)
    tcfg = _train_config(args)
    model, history = train(build_model(mcfg), dataset, tcfg)
    ctx = RunContext(args, {"model": mcfg.to_dict(), "train": tcfg.to_dict()})
    ctx.add(args.out, to_bytes(model))
    ctx.add(Path(str(args.out) + ".history.txt"), format_history(history).encode())
    ctx.commit()
    _print_history(history, out)


def cmd_distill(args, out):
    dataset = LabeledDataset.load(args.data)
    teacher = load_weights(args.teacher)
    if isinstance(teacher, QuantizedModel):
        raise DataError("teacher must be a float model")
    mcfg = _model_config(args, dataset)
    tcfg = _train_config(args, alpha_kd=args.alpha_kd, temperature=args.temperature)
    student, history = distill(teacher, mcfg, dataset, tcfg)
    ctx = RunContext(args, {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "teacher": str(args.teacher)})
    ctx.add(args.out, to_bytes(student))
    ctx.add(Path(str(args.out) + ".history.txt"), format_history(history).encode())
    ctx.commit()
    _print_history(history, out)


def cmd_quantize(args, out):
    model = load_weights(args.weights)
    if isinstance(model, QuantizedModel):
        raise DataError(f"{args.weights} is already quantized")
    dataset = LabeledDataset.load(args.data)
    X = dataset.X[: args.n_calibration]
    qmodel = calibrate_and_quantize(model, model_inputs(X, model.config))
    ctx = RunContext(args, {"n_calibration": len(X), "model": model.config.to_dict()})
    ctx.add(args.out, to_bytes(qmodel))
    ctx.commit()
    print(f"quantized {args.weights} on {len(X)} windows -> {args.out}", file=out)


def _single_window(model_cfg, args) -> np.ndarray:
    sig = read_signal(args.input, sample_rate_hz=args.rate)
    if sig.channels > model_cfg.signal_channels:
        raise DataError(f"signal has {sig.channels} channels, model accepts {model_cfg.signal_channels}")
    w = SignalWindow(sig.data, sig.sample_rate_hz)
    if args.target_rate is not None:
        w = resample_linear(w, args.target_rate)
    if w.window_len != model_cfg.window_len:
        w = fit_length(w, model_cfg.window_len)
    return w.data


def cmd_infer(args, out):
    model = load_weights(args.weights)
    cfg = model.config
    q = model_inputs(_single_window(cfg, args)[None], cfg)[0]
    if isinstance(model, QuantizedModel):
        logits = infer_int8(model, q)
    else:
        logits = infer_float(model, dequantize_q7(q))
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if cfg.task_kind == "multi-label":
        probs = sigmoid(logits)
        pred = [int(i) for i in np.flatnonzero(probs >= 0.5)]
    else:
        probs = softmax(logits)
        pred = int(np.argmax(logits))
    if args.format == "json-lines":
        print(json.dumps({"logits": logits.tolist(), "probabilities": probs.tolist(), "predicted": pred}), file=out)
    else:
        print("logits " + " ".join(f"{v:.6f}" for v in logits), file=out)
        print(f"predicted {pred}", file=out)


def cmd_profile(args, out):
    from threadpoolctl import threadpool_limits

    qmodel = load_weights(args.weights)
    if not isinstance(qmodel, QuantizedModel):
        raise DataError("profile needs a quantized model (run `quantize` first)")
    sig = read_signal(args.input, sample_rate_hz=args.rate)
    with threadpool_limits(limits=1):
        report = profile_pipeline(sig, qmodel, args.repeats, args.target_rate, args.tile_width)
    data = emit_report(report, args.format)
    if args.out:
        ctx = RunContext(args, {"repeats": args.repeats, "format": args.format, "tile_width": args.tile_width})
        ctx.add(args.out, data)
        ctx.commit()
    out.write(data.decode())


def cmd_budget(args, out):
    if args.weights:
        model = load_weights(args.weights)
    else:
        factory = {"default": ModelConfig, "ecg": ecg_config, "emg": emg_config}[args.preset]
        model = build_model(factory())
    report = budget_report(model)
    out.write(report.to_text())
    print("overall           " + ("PASS" if report.ok else "FAIL"), file=out)


def cmd_ablate(args, out):
    dataset = LabeledDataset.load(args.data)
    base_cfg = _model_config(args, dataset)
    out_dir = Path(args.out_dir)
    variants = []
    if args.axis == "pe":
        variants = [("pe-on", replace(base_cfg, use_positional=True), None),
                    ("pe-off", replace(base_cfg, use_positional=False), None)]
    elif args.axis == "kernels":
        for ks in args.kernel_sets:
            variants.append(("k" + "-".join(map(str, ks)), replace(base_cfg, kernel_set=ks), None))
    else:
        if args.teacher is None:
            raise ConfigError("--axis alpha needs --teacher")
        for a in args.alphas:
            variants.append((f"alpha{a:g}", base_cfg, a))
    teacher = load_weights(args.teacher) if args.axis == "alpha" else None
    rows = []
    for name, mcfg, alpha in variants:
        if alpha is None:
            tcfg = _train_config(args)
            model, history = train(build_model(mcfg), dataset, tcfg)
        else:
            tcfg = _train_config(args, alpha_kd=alpha, temperature=args.temperature)
            model, history = distill(teacher, mcfg, dataset, tcfg)
        ctx = RunContext(args, {"variant": name, "model": mcfg.to_dict(), "train": tcfg.to_dict()})
        ctx.add(out_dir / f"{name}.phlw", to_bytes(model))
        ctx.commit()
        rows.append((name, mcfg.in_channels, history[-1].val_macro_f1))
    print(f"{'variant':<16}{'in_ch':>6}  {'val macro-F1':>12}", file=out)
    for name, ch, f1 in rows:
        print(f"{name:<16}{ch:>6}  {f1:>12.4f}", file=out)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="physiolite", description="Q7 biosignal classification pipeline for microcontrollers")
    p.add_argument("--version", action="version", version=f"physiolite {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = add("gen", cmd_gen, "generate a seeded synthetic dataset (.npz)")
    sp.add_argument("--kind", choices=("spectral", "order"), default="spectral")
    sp.add_argument("--n-windows", type=int)
    sp.add_argument("--window-len", type=int)
    sp.add_argument("--channels", type=int)
    sp.add_argument("--rate", type=float, help="sample rate (Hz)")
    sp.add_argument("--out", required=True)

    sp = add("condition", cmd_condition, "ECG/EMG filtering and per-channel z-score")
    sp.add_argument("--kind", choices=("ecg", "emg"), required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--rate", type=float, help="sample rate for CSV input")
    sp.add_argument("--out", required=True)

    sp = add("preprocess", cmd_preprocess, "window, resample, channel-pad, z-score and Q7-quantize a signal")
    sp.add_argument("--input", required=True)
    sp.add_argument("--rate", type=float, help="sample rate for CSV input")
    sp.add_argument("--window-len", type=int, required=True)
    sp.add_argument("--step", type=int, help="hop between windows (default: window length)")
    sp.add_argument("--target-rate", type=float)
    sp.add_argument("--channels", type=int, help="zero-pad to this many channels")
    sp.add_argument("--out", required=True, help="int8 array (.npy)")

    sp = add("encode", cmd_encode, "append Q7 positional channels to Q7 windows")
    sp.add_argument("--input", help="int8 (N, C, T) or (C, T) array (.npy)")
    sp.add_argument("--out")
    sp.add_argument("--freqs", type=int, default=8)
    sp.add_argument("--alpha-pe", type=float, default=0.1)
    sp.add_argument("--window-len", type=int, help="table length for --dump-table")
    sp.add_argument("--dump-table", action="store_true", help="print 'k t sin cos' table lines and exit")

    sp = add("train", cmd_train, "train a float model on a dataset")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="weights (.phlw)")
    _add_model_flags(sp)
    _add_train_flags(sp)

    sp = add("distill", cmd_distill, "train a student against a frozen teacher")
    sp.add_argument("--data", required=True)
    sp.add_argument("--teacher", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--alpha-kd", type=float, default=0.3)
    sp.add_argument("--temperature", type=float, default=2.0)
    _add_model_flags(sp)
    _add_train_flags(sp)

    sp = add("quantize", cmd_quantize, "post-training int8 quantization")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data", required=True, help="calibration dataset")
    sp.add_argument("--n-calibration", type=int, default=128)
    sp.add_argument("--out", required=True)

    for name, fn, text in (("infer", cmd_infer, "classify one signal window"),
                           ("profile", cmd_profile, "per-stage host latency of the int8 pipeline")):
        sp = add(name, fn, text)
        sp.add_argument("--weights", required=True)
        sp.add_argument("--input", required=True)
        sp.add_argument("--rate", type=float, help="sample rate for CSV input")
        sp.add_argument("--target-rate", type=float)
        if name == "profile":
            sp.add_argument("--repeats", type=int, default=10)
            sp.add_argument("--tile-width", type=int, default=64)
            sp.add_argument("--format", choices=("text", "json-lines"), default="text")
            sp.add_argument("--out", help="also write the report here")
        else:
            sp.add_argument("--format", choices=("text", "json-lines"), default="text")

    sp = add("budget", cmd_budget, "check weight, bias and activation memory against the device limits")
    sp.add_argument("--weights")
    sp.add_argument("--preset", choices=("default", "ecg", "emg"), default="ecg",
                    help="config to check when no weights are given")

    sp = add("ablate", cmd_ablate, "sequential seed-matched ablation runs")
    sp.add_argument("--axis", choices=("pe", "kernels", "alpha"), required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--kernel-sets", type=lambda s: [_kernels(x) for x in s.split(";")],
                    default=[(3, 5, 7), (3,), (7,), (3, 7)], help="e.g. '3,5,7;3;7'")
    sp.add_argument("--alphas", type=_floats, default=(0.3, 0.5, 0.7))
    sp.add_argument("--teacher")
    sp.add_argument("--temperature", type=float, default=2.0)
    _add_model_flags(sp)
    _add_train_flags(sp)
    return p


_INPUT_ATTRS = ("input", "data", "weights", "teacher")


def main(argv=None, out=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args._argv = argv
    args._inputs = [getattr(args, a) for a in _INPUT_ATTRS if getattr(args, a, None)]
    try:
        args.func(args, out)
    except (ConfigError, UsageError) as exc:
        print(f"physiolite {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"physiolite {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"physiolite {args.command}: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
