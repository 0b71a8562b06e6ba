"""Inference throughput measurement and an analytic FLOP model.

The analytic model is a closed form over the encoder shape; an
instrumented counter on the forward pass (same FLOP conventions:
multiply-add = 2, softmax 5/element, normalization 4/element,
layernorm 5/element, everything else free) must agree with it exactly.
Hardware numbers are reported as medians with spread; cross-variant
claims bind to FLOP ratios and the direction of measured speedups.
"""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import attention as A
from . import encoder as E


class MeasurementError(RuntimeError):
    pass


class BenchSpecError(ValueError):
    pass


_MIN_ELAPSED_S = 1e-4  # below this the timer resolution dominates


@dataclass(frozen=True)
class BenchSpec:
    name: str
    config: E.EncoderConfig
    batch_sizes: tuple = (32,)
    seq_lens: tuple = (128,)
    warmup_iters: int = 1
    measured_iters: int = 5
    threads: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.measured_iters < 3:
            raise BenchSpecError("measured_iters must be >= 3")
        if self.warmup_iters < 1:
            raise BenchSpecError("warmup_iters must be >= 1")
        if any(s > self.config.max_position for s in self.seq_lens):
            raise BenchSpecError("seq_len exceeds config max_position")


@dataclass
class BenchRow:
    variant: str
    batch: int
    seq_len: int
    threads: int
    tokens_per_sec_median: float
    tokens_per_sec_min: float
    tokens_per_sec_max: float
    flops_forward: int
    speedup_vs_baseline: float = float("nan")
    flop_ratio_vs_baseline: float = float("nan")


CSV_HEADER = ["variant", "batch", "seq_len", "threads",
              "tokens_per_sec_median", "tokens_per_sec_min",
              "tokens_per_sec_max", "flops_forward",
              "speedup_vs_baseline", "flop_ratio_vs_baseline"]


@dataclass
class BenchReport:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.rows:
            writer.writerow([r.variant, r.batch, r.seq_len, r.threads,
                             repr(r.tokens_per_sec_median),
                             repr(r.tokens_per_sec_min),
                             repr(r.tokens_per_sec_max),
                             r.flops_forward,
                             repr(r.speedup_vs_baseline),
                             repr(r.flop_ratio_vs_baseline)])
        return out.getvalue()

    @staticmethod
    def from_csv(text: str) -> "BenchReport":
        report = BenchReport()
        lines = text.splitlines()
        if lines[0].split(",") != CSV_HEADER:
            raise BenchSpecError("unexpected bench CSV header")
        for line in lines[1:]:
            v, b, s, th, med, lo, hi, fl, sp, fr = line.split(",")
            report.rows.append(BenchRow(v, int(b), int(s), int(th),
                                        float(med), float(lo), float(hi),
                                        int(fl), float(sp), float(fr)))
        return report

    def plot_data(self) -> str:
        """One block per variant of `seq_len speedup` pairs, blank-line
        separated, for external plotting."""
        blocks = []
        variants = []
        for r in self.rows:
            if r.variant not in variants:
                variants.append(r.variant)
        for name in variants:
            lines = [f"# {name}"]
            for r in self.rows:
                if r.variant == name:
                    lines.append(f"{r.seq_len} {r.speedup_vs_baseline:.6g}")
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"


# ---------------------------------------------------------------------------
# analytic FLOP model


def analytic_flops(config: E.EncoderConfig, batch: int, seq_len: int) -> int:
    """Forward-pass FLOPs for one batch.

    Per attention unit: 8*B*S*H^2 (four projections) + 4*B*S^2*H
    (query-key product and score-value mixing) + the score function
    (softmax 5*B*A*S^2, normalization 4*B*A*S^2) + its layernorm.
    Per intermediate unit: 4*B*S*H*I plus its layernorm. Layernorms
    (including the embedding one) cost 5 FLOPs per element; lookups,
    bias adds, residuals, GELU and eval-mode dropout are free.
    """
    b, s = batch, seq_len
    h, i = config.hidden_size, config.intermediate_size
    heads = config.num_heads
    m = config.num_attention_blocks
    u = config.num_intermediate_units
    ln = T.FLOPS_PER_ELEM_LAYERNORM * b * s * h

    total = ln  # embedding layernorm
    per_attn = 8 * b * s * h * h + 4 * b * s * s * h
    if config.attention_kind == A.NORMALIZED_BANDD:
        per_attn += T.FLOPS_PER_ELEM_NORMALIZE * b * heads * s * s
    else:
        per_attn += T.FLOPS_PER_ELEM_SOFTMAX * b * heads * s * s
    if config.attn_layernorm == E.KEEP:
        per_attn += ln
    total += m * per_attn
    per_inter = 4 * b * s * h * i
    if config.mlp_layernorm == E.KEEP:
        per_inter += ln
    total += u * per_inter
    return total


def instrumented_flops(stack: E.EncoderStack, batch: int, seq_len: int,
                       seed: int = 0) -> int:
    """Count FLOPs of an actual eval-mode forward pass."""
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, stack.config.vocab_size, size=(batch, seq_len))
    with T.no_grad(), T.count_flops() as counter:
        E.forward(stack, ids, training=False)
    return counter.total


def flop_ratio(base: E.EncoderConfig, variant: E.EncoderConfig,
               batch: int = 32, seq_len: int = 128) -> float:
    return analytic_flops(base, batch, seq_len) / analytic_flops(
        variant, batch, seq_len)


# ---------------------------------------------------------------------------
# throughput measurement


def _timed_forward(stack, ids, threads):
    if threads <= 1:
        t0 = time.perf_counter()
        with T.no_grad():
            E.forward(stack, ids, training=False)
        return time.perf_counter() - t0
    # each worker gets its own input buffer; the stack is shared read-only
    buffers = [ids.copy() for _ in range(threads)]

    def run(buf):
        with T.no_grad():
            E.forward(stack, buf, training=False)

    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(run, buffers))
    return (time.perf_counter() - t0) / threads


def measure_throughput(stack: E.EncoderStack, spec: BenchSpec) -> list:
    """Median tokens/sec (with min/max spread) per (batch, seq_len)."""
    rng = np.random.default_rng(spec.seed)
    rows = []
    for batch in spec.batch_sizes:
        for seq_len in spec.seq_lens:
            ids = rng.integers(0, stack.config.vocab_size,
                               size=(batch, seq_len))
            for _ in range(spec.warmup_iters):
                _timed_forward(stack, ids, spec.threads)
            elapsed = [_timed_forward(stack, ids, spec.threads)
                       for _ in range(spec.measured_iters)]
            if min(elapsed) < _MIN_ELAPSED_S:
                raise MeasurementError(
                    f"forward pass too fast ({min(elapsed):.2e}s) for the "
                    "timer; increase batch, sequence length or iterations")
            tps = [batch * seq_len / e for e in elapsed]
            rows.append(BenchRow(
                variant=spec.name, batch=batch, seq_len=seq_len,
                threads=spec.threads,
                tokens_per_sec_median=float(np.median(tps)),
                tokens_per_sec_min=float(min(tps)),
                tokens_per_sec_max=float(max(tps)),
                flops_forward=analytic_flops(stack.config, batch, seq_len)))
    return rows


def sweep(baseline: BenchSpec, variants: list, build_seed: int = 0) -> BenchReport:
    """Measure the baseline plus every variant over the full cartesian
    grid and fill in speedups and FLOP ratios against the baseline row
    with the same (batch, seq_len). Per-variant failures are recorded
    as rows with NaN timings; the sweep continues."""
    report = BenchReport()
    base_stack = E.build_stack(baseline.config, build_seed)
    base_rows = measure_throughput(base_stack, baseline)
    base_by_key = {(r.batch, r.seq_len): r for r in base_rows}
    for r in base_rows:
        r.speedup_vs_baseline = 1.0
        r.flop_ratio_vs_baseline = 1.0
    report.rows.extend(base_rows)

    for spec in variants:
        try:
            stack = E.build_stack(spec.config, build_seed)
            rows = measure_throughput(stack, spec)
        except (MeasurementError, E.ConfigError) as exc:
            for batch in spec.batch_sizes:
                for seq_len in spec.seq_lens:
                    report.rows.append(BenchRow(
                        variant=f"{spec.name}!error:{type(exc).__name__}",
                        batch=batch, seq_len=seq_len, threads=spec.threads,
                        tokens_per_sec_median=float("nan"),
                        tokens_per_sec_min=float("nan"),
                        tokens_per_sec_max=float("nan"),
                        flops_forward=0))
            continue
        for r in rows:
            base = base_by_key.get((r.batch, r.seq_len))
            if base is not None:
                r.speedup_vs_baseline = (r.tokens_per_sec_median
                                         / base.tokens_per_sec_median)
                r.flop_ratio_vs_baseline = base.flops_forward / r.flops_forward
        report.rows.extend(rows)
    return report
