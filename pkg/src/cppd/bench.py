"""Single-thread, batch-1 inference latency.

Only the decode call is timed: images are converted to tensors and any
labels are consumed before the clock starts.
"""
from __future__ import annotations

import platform
import statistics
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import VariantKind
from .synthgen import build_atlas, render, sample_text
from .vocab import CharSet, decode_ids


@dataclass
class BenchEntry:
    variant: str
    length: int | None  # emitted characters forced for AR variants, None if not controlled
    mean_ms: float
    std_ms: float
    n: int

    @property
    def fps(self) -> float:
        return 1000.0 / self.mean_ms


@dataclass
class BenchReport:
    entries: list[BenchEntry] = field(default_factory=list)
    threads: int = 1
    hardware: str = field(default_factory=lambda: f"{platform.machine()} {platform.processor() or ''}".strip())

    def get(self, variant: str, length: int | None = None) -> BenchEntry:
        for e in self.entries:
            if e.variant == variant and (length is None or e.length == length):
                return e
        raise KeyError((variant, length))

    def mean_over(self, variant: str) -> float:
        """Mean latency of ``variant`` averaged over all its measured lengths."""
        ms = [e.mean_ms for e in self.entries if e.variant == variant]
        if not ms:
            raise KeyError(variant)
        return sum(ms) / len(ms)

    def format_table(self, baseline: str | None = None, target: str | None = None) -> str:
        rows = [f"{'variant':<8} {'length':>6} {'mean_ms':>9} {'std_ms':>8} {'fps':>9} {'n':>6}"]
        for e in self.entries:
            length = "-" if e.length is None else str(e.length)
            rows.append(f"{e.variant:<8} {length:>6} {e.mean_ms:>9.3f} {e.std_ms:>8.3f} {e.fps:>9.1f} {e.n:>6}")
        if baseline and target:
            rows.append(f"speedup {baseline}->{target}: {speedup_report(self, baseline, target):.2f}x")
        rows.append(f"threads={self.threads} hardware={self.hardware}")
        return "\n".join(rows)


def speedup_report(report: BenchReport | dict, baseline_variant: str, target_variant: str) -> float:
    """Ratio of baseline to target mean latency (both averaged over their measured lengths)."""
    if isinstance(report, dict):
        return report[baseline_variant] / report[target_variant]
    return report.mean_over(baseline_variant) / report.mean_over(target_variant)


def fps_speedup(baseline_fps: float, target_fps: float) -> float:
    return target_fps / baseline_fps


def length_images(charset: CharSet, H: int, W: int, lengths, n: int, seed: int = 0) -> dict[int, np.ndarray]:
    """``n`` rendered images per text length, drawn with glyphs narrow enough for the longest one."""
    spacing = 1
    glyph_w = (W - spacing) // max(lengths) - spacing
    atlas = build_atlas(charset, glyph_h=min(12, H), glyph_w=min(7, glyph_w), spacing=spacing)
    out = {}
    for length in lengths:
        rng = np.random.default_rng([seed, length])
        out[length] = np.stack([render(sample_text(rng, charset, length, length), atlas, H, W, charset)
                                for _ in range(n)])
    return out


def _decode_one(model, image: torch.Tensor, emit_len: int | None):
    kind = VariantKind(model.cfg.variant)
    if kind.autoregressive:
        steps = None if emit_len is None else emit_len + 1
        ids = model.greedy_ids(image, fixed_steps=steps)
        return decode_ids(ids[0].tolist(), model.cfg.charset)
    return model.predict(image)[0]


def time_decodes(model, images: list[torch.Tensor], reps: int, warmup_reps: int,
                 emit_len: int | None = None) -> list[float]:
    """Per-decode wall-clock in ms over ``reps`` passes of ``images`` after ``warmup_reps`` discarded passes."""
    model.eval()
    times = []
    with torch.inference_mode():
        for r in range(warmup_reps + reps):
            for img in images:
                t0 = time.perf_counter()
                _decode_one(model, img, emit_len)
                dt = (time.perf_counter() - t0) * 1000.0
                if r >= warmup_reps:
                    times.append(dt)
    return times


def _entry(variant: str, length, times: list[float]) -> BenchEntry:
    return BenchEntry(variant, length, statistics.fmean(times), statistics.pstdev(times), len(times))


def bench_latency(model, images: np.ndarray, reps: int = 1, warmup_reps: int = 1,
                  emit_len: int | None = None) -> BenchEntry:
    """Batch-1 latency of one model over ``images`` (``N x H x W``)."""
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        tensors = [torch.from_numpy(np.ascontiguousarray(im[None])) for im in images]
        times = time_decodes(model, tensors, reps, warmup_reps, emit_len)
    finally:
        torch.set_num_threads(prev)
    return _entry(model.cfg.variant, emit_len, times)


def bench_lengths(models: dict[str, object], images_by_length: dict[int, np.ndarray], reps: int = 1,
                  warmup_reps: int = 1, chunk: int = 50) -> BenchReport:
    """Benchmark every model on images of each text length.

    AR variants are forced to emit exactly that many characters (plus
    ``<eos>``); parallel variants simply decode the images. Models and lengths
    are interleaved in chunks so slow machine drift affects every cell alike.
    """
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    tensors = {n: [torch.from_numpy(np.ascontiguousarray(im[None])) for im in imgs]
               for n, imgs in images_by_length.items()}
    cells = [(name, n) for name in models for n in images_by_length]
    times: dict[tuple, list[float]] = {c: [] for c in cells}
    try:
        for name, n in cells:
            time_decodes(models[name], tensors[n][:chunk], 0, warmup_reps, n)
        size = max(len(t) for t in tensors.values())
        for _ in range(reps):
            for start in range(0, size, chunk):
                for name, n in cells:
                    part = tensors[n][start:start + chunk]
                    times[(name, n)].extend(time_decodes(models[name], part, 1, 0, n))
    finally:
        torch.set_num_threads(prev)
    report = BenchReport(threads=1)
    for name, n in cells:
        report.entries.append(_entry(name, n, times[(name, n)]))
    return report
