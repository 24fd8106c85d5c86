"""Host-side latency breakdown of the five-stage inference pipeline.

Stage timings are wall-clock on the host and say nothing about absolute
microcontroller latency; only the stage split and report shape carry over.
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError
from .model import QuantizedModel, infer_int8, tile_pack
from .pipeline import Q7_SIGMA_RANGE, augment_q7
from .preprocess import fit_length, quantize_q7, resample_linear, zero_pad_channels, zscore_streaming
from .signal_io import MultiChannelSignal, SignalWindow

STAGES = ("Resampling", "Z-Norm/Quant", "Pos. Encoding", "Tile/Pack", "Inference")
END_TO_END = "End-to-End"
HOST_NOTE = "host wall-clock timings; not comparable to on-device latency"


@dataclass(frozen=True)
class LatencyReport:
    samples_ms: dict            # stage -> tuple of per-run durations
    end_to_end_ms: tuple
    repeats: int
    note: str = HOST_NOTE

    def mean(self, stage: str) -> float:
        return statistics.fmean(self._samples(stage))

    def std(self, stage: str) -> float:
        s = self._samples(stage)
        return statistics.pstdev(s) if len(s) > 1 else 0.0

    def _samples(self, stage):
        return self.end_to_end_ms if stage == END_TO_END else self.samples_ms[stage]

    @property
    def stage_sum_ms(self) -> float:
        return sum(self.mean(s) for s in STAGES)


def _run_once(window: SignalWindow, qmodel: QuantizedModel, target_rate_hz, tile_width: int):
    cfg = qmodel.config
    t0 = time.perf_counter()
    w = window
    if target_rate_hz is not None and target_rate_hz != w.sample_rate_hz:
        w = resample_linear(w, target_rate_hz)
    w = zero_pad_channels(w, cfg.signal_channels)
    if w.window_len != cfg.window_len:
        w = fit_length(w, cfg.window_len)
    t1 = time.perf_counter()
    z, _ = zscore_streaming(w)
    q = quantize_q7(z.data / Q7_SIGMA_RANGE)
    t2 = time.perf_counter()
    aug = augment_q7(q, cfg)
    t3 = time.perf_counter()
    packed = tile_pack(aug, tile_width)
    t4 = time.perf_counter()
    logits = infer_int8(qmodel, aug)
    t5 = time.perf_counter()
    stamps = (t0, t1, t2, t3, t4, t5)
    return [1e3 * (b - a) for a, b in zip(stamps, stamps[1:])], 1e3 * (t5 - t0), logits, packed


def profile_pipeline(signal: MultiChannelSignal, qmodel: QuantizedModel, repeats: int = 10,
                     target_rate_hz: float | None = None, tile_width: int = 64) -> LatencyReport:
    """Time every stage ``repeats`` times after one discarded warmup pass."""
    if repeats < 1:
        raise DataError("repeats must be >= 1")
    if signal.channels > qmodel.config.signal_channels:
        raise DataError(f"signal has {signal.channels} channels, model accepts {qmodel.config.signal_channels}")
    window = SignalWindow(signal.data, signal.sample_rate_hz)
    _run_once(window, qmodel, target_rate_hz, tile_width)
    per_stage = {s: [] for s in STAGES}
    e2e = []
    for _ in range(repeats):
        stage_ms, total, _, _ = _run_once(window, qmodel, target_rate_hz, tile_width)
        for s, v in zip(STAGES, stage_ms):
            per_stage[s].append(v)
        e2e.append(total)
    return LatencyReport({s: tuple(v) for s, v in per_stage.items()}, tuple(e2e), repeats)


def emit_report(report: LatencyReport, format: str = "text") -> bytes:
    if format in ("json-lines", "jsonl"):
        lines = [json.dumps({"record": "meta", "repeats": report.repeats, "note": report.note})]
        for stage in STAGES + (END_TO_END,):
            lines.append(json.dumps({"record": "stage", "stage": stage, "mean_ms": report.mean(stage),
                                     "std_ms": report.std(stage), "samples_ms": list(report._samples(stage))}))
        return ("\n".join(lines) + "\n").encode()
    if format != "text":
        raise DataError(f"unknown report format {format!r}")
    width = max(len(s) for s in STAGES + (END_TO_END,))
    rows = [f"{'Stage':<{width}}  {'mean (ms)':>10}  {'std (ms)':>10}", "-" * (width + 24)]
    for stage in STAGES:
        rows.append(f"{stage:<{width}}  {report.mean(stage):>10.3f}  {report.std(stage):>10.3f}")
    rows.append("-" * (width + 24))
    rows.append(f"{END_TO_END:<{width}}  {report.mean(END_TO_END):>10.3f}  {report.std(END_TO_END):>10.3f}")
    rows.append(f"({report.repeats} runs, warmup excluded; {report.note})")
    return ("\n".join(rows) + "\n").encode()


def parse_report(data: bytes) -> LatencyReport:
    """Inverse of ``emit_report(..., "json-lines")``."""
    meta, samples, e2e = None, {}, None
    for line in data.decode().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec["record"] == "meta":
            meta = rec
        elif rec["stage"] == END_TO_END:
            e2e = tuple(rec["samples_ms"])
        else:
            samples[rec["stage"]] = tuple(rec["samples_ms"])
    if meta is None or e2e is None or set(samples) != set(STAGES):
        raise DataError("incomplete latency report")
    return LatencyReport({s: samples[s] for s in STAGES}, e2e, meta["repeats"], meta["note"])
