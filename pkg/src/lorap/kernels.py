"""Quantized aggregation kernels, the fused aggregate-dequantize-prompt-
requantize pipeline, an unfused reference, and a latency harness.

The fused and unfused drivers call the same per-row numba helpers in the
same order, so their outputs are bit-identical; the fused path just never
materializes a full-size intermediate.  Non-uniform edge weights switch the
integer accumulation to a float64 per-edge path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _fastpath
from .errors import InputError, PlanError
from .graphs import Graph
from .prompts import PromptBank, POST_AGG_MODES
from .quant import QuantParams, QuantizedTensor, calibrate, pack_codes, quantize, tensor_codes
from .rng import stream

#: fixed extra scratch on top of the per-tile buffers: integer and float
#: accumulator rows, the aggregated-code row, and the rank-sized temporary
_CONST_SCRATCH_ROWS = 3


@dataclass(frozen=True)
class KernelPlan:
    bits: int
    fuse: bool
    d: int
    k: int = 0
    r: int = 0
    tile_rows: int = 64

    def __post_init__(self):
        if self.bits not in (4, 8, 32):
            raise PlanError(f"unsupported kernel bit-width {self.bits}")
        if self.tile_rows < 1:
            raise PlanError("tile_rows must be >= 1")
        if self.fuse and (self.k < 1 or self.r < 1):
            raise PlanError("fused plan needs prompt dims k and r")

    def scratch_limit(self) -> int:
        """Maximum per-tile scratch in reals: tile_rows*(d+k+r)."""
        return self.tile_rows * (self.d + self.k + self.r)

    def scratch_used(self) -> int:
        """Scratch the fused driver actually allocates (tile buffers only;
        the constant per-row accumulators are accounted separately)."""
        return self.tile_rows * (self.d + self.k) + self.r

    def check_scratch(self):
        if self.scratch_used() > self.scratch_limit():
            raise PlanError("tile scratch exceeds the plan budget")

    def check_overflow(self, g: Graph, p: QuantParams):
        span = p.q_max - p.q_min
        max_deg = int(g.degree.max()) if g.num_nodes else 0
        if max_deg * span >= 2 ** 62:
            raise PlanError("degree * code span overflows the accumulator")


def _edge_arrays(g: Graph):
    """(ew, w_uniform): empty ew selects the integer path with the uniform
    weight folded into the requantization scale."""
    if g.edge_weight is None:
        return np.empty(0, dtype=np.float64), 1.0
    ew = np.asarray(g.edge_weight, dtype=np.float64)
    if ew.size and np.all(ew == ew[0]):
        return np.empty(0, dtype=np.float64), float(ew[0])
    return ew, 1.0


def _input_codes(xq: QuantizedTensor) -> np.ndarray:
    if xq.params.signed:
        raise InputError("aggregation kernels take unsigned activation codes")
    if len(xq.shape) != 2:
        raise InputError("expected a 2-D quantized tensor")
    return np.ascontiguousarray(tensor_codes(xq).astype(np.uint8))


def _lut_span(g: Graph, bits: int) -> int:
    """Accumulator magnitude bound for the int16 fast path, or 0 when raw
    code row sums may not fit."""
    if g.degree.size == 0:
        return 1
    span = int(g.degree.max()) * ((1 << bits) - 1)
    return span if 0 < span <= 32767 else 0


def _agg_int_dispatch(g: Graph, codes, p_in: QuantParams, p_out: QuantParams,
                      w_uniform: float, out) -> None:
    """Uniform-weight integer aggregation into preallocated output codes."""
    span = _lut_span(g, p_in.bits)
    if span:
        _fastpath.agg_codes_i16(g.row_ptr, g.col_idx, codes,
                                p_in.zero_point, p_in.scale, w_uniform,
                                p_out.scale, p_out.zero_point,
                                p_out.q_min, p_out.q_max, span, out)
    else:
        _fastpath.agg_codes_int(g.row_ptr, g.col_idx, codes,
                                p_in.zero_point, p_in.scale, w_uniform,
                                p_out.scale, p_out.zero_point,
                                p_out.q_min, p_out.q_max, out)


def quantized_aggregate(g: Graph, xq: QuantizedTensor, out_params: QuantParams,
                        want_acc: bool = False):
    """Sum-aggregate integer codes and requantize once per row.

    Returns (accumulators or None, QuantizedTensor).  Accumulators are the
    raw int64 per-row sums of (code - Z), available only on the uniform-
    weight integer path.
    """
    codes = _input_codes(xq)
    n, d = codes.shape
    if n != g.num_nodes:
        raise InputError(f"{n} feature rows for {g.num_nodes} nodes")
    KernelPlan(xq.params.bits, False, d).check_overflow(g, xq.params)
    p_in, p_out = xq.params, out_params
    ew, w_uniform = _edge_arrays(g)
    out = np.empty((n, d), dtype=np.int64)
    if ew.size:
        if want_acc:
            raise InputError("integer accumulators need uniform edge weights")
        _fastpath.agg_codes_float(g.row_ptr, g.col_idx, ew, codes,
                                  p_in.zero_point, p_in.scale,
                                  p_out.scale, p_out.zero_point,
                                  p_out.q_min, p_out.q_max, out)
        acc = None
    else:
        _agg_int_dispatch(g, codes, p_in, p_out, w_uniform, out)
        acc = None
        if want_acc:
            acc = np.empty((n, d), dtype=np.int64)
            _fastpath.agg_accumulators_int(g.row_ptr, g.col_idx, codes,
                                           p_in.zero_point, acc)
    packed = pack_codes((out - p_out.q_min).ravel(), p_out.bits)
    return acc, QuantizedTensor(packed, (n, d), p_out)


def _bank_arrays(bank: PromptBank, layer: int):
    if bank.mode not in POST_AGG_MODES:
        raise InputError(f"bank mode {bank.mode!r} has no post-aggregation prompts")
    if not 0 <= layer < bank.num_layers:
        raise InputError(f"layer {layer} out of range")
    return (np.ascontiguousarray(bank.phi_weight), np.ascontiguousarray(bank.phi_bias),
            np.ascontiguousarray(bank.p_a[layer]), np.ascontiguousarray(bank.p_b[layer]))


def lorap_unfused(g: Graph, xq: QuantizedTensor, bank: PromptBank, layer: int,
                  out_params: QuantParams, agg_params: QuantParams | None = None):
    """Reference pipeline with full-size intermediates materialized at every
    step: aggregated codes, dequantized features, logits, mixing weights,
    prompted values, requantized output."""
    codes = _input_codes(xq)
    n, d = codes.shape
    if n != g.num_nodes:
        raise InputError(f"{n} feature rows for {g.num_nodes} nodes")
    if d != bank.feature_dim:
        raise InputError("feature width does not match the prompt bank")
    p_agg = out_params if agg_params is None else agg_params
    KernelPlan(xq.params.bits, False, d).check_overflow(g, xq.params)
    phi_w, phi_b, p_a, p_b = _bank_arrays(bank, layer)
    p_in = xq.params
    ew, w_uniform = _edge_arrays(g)
    agg = np.empty((n, d), dtype=np.int64)
    if ew.size:
        _fastpath.agg_codes_float(g.row_ptr, g.col_idx, ew, codes,
                                  p_in.zero_point, p_in.scale,
                                  p_agg.scale, p_agg.zero_point,
                                  p_agg.q_min, p_agg.q_max, agg)
    else:
        _agg_int_dispatch(g, codes, p_in, p_agg, w_uniform, agg)
    shat = np.empty((n, d))
    _fastpath.dequant_all(agg, p_agg.scale, p_agg.zero_point, shat)
    logits = np.empty((n, bank.num_bases))
    _fastpath.logits_all(shat, phi_w, phi_b, logits)
    _fastpath.softmax_all(logits)
    out = np.empty((n, d), dtype=np.int64)
    _fastpath.prompt_add_requant_all(shat, logits, p_a, p_b,
                                     out_params.scale, out_params.zero_point,
                                     out_params.q_min, out_params.q_max, out)
    packed = pack_codes((out - out_params.q_min).ravel(), out_params.bits)
    return QuantizedTensor(packed, (n, d), out_params)


def lorap_fused(g: Graph, xq: QuantizedTensor, bank: PromptBank, layer: int,
                out_params: QuantParams, plan: KernelPlan,
                agg_params: QuantParams | None = None):
    """Fused pipeline: one pass per tile of rows, scratch bounded by the
    plan; bit-exact equal to lorap_unfused."""
    if not plan.fuse:
        raise PlanError("plan does not enable fusion")
    codes = _input_codes(xq)
    n, d = codes.shape
    if n != g.num_nodes:
        raise InputError(f"{n} feature rows for {g.num_nodes} nodes")
    if (d, bank.num_bases, bank.rank) != (plan.d, plan.k, plan.r):
        raise PlanError(f"plan dims ({plan.d},{plan.k},{plan.r}) do not match "
                        f"instance ({d},{bank.num_bases},{bank.rank})")
    if d != bank.feature_dim:
        raise InputError("feature width does not match the prompt bank")
    plan.check_scratch()
    plan.check_overflow(g, xq.params)
    p_agg = out_params if agg_params is None else agg_params
    phi_w, phi_b, p_a, p_b = _bank_arrays(bank, layer)
    p_in = xq.params
    ew, w_uniform = _edge_arrays(g)
    out = np.empty((n, d), dtype=np.int64)
    _fastpath.fused_pipeline(g.row_ptr, g.col_idx, ew, codes,
                             p_in.zero_point, p_in.scale, w_uniform,
                             p_agg.scale, p_agg.zero_point, p_agg.q_min, p_agg.q_max,
                             phi_w, phi_b, p_a, p_b,
                             out_params.scale, out_params.zero_point,
                             out_params.q_min, out_params.q_max,
                             plan.tile_rows, _lut_span(g, p_in.bits), out)
    packed = pack_codes((out - out_params.q_min).ravel(), out_params.bits)
    return QuantizedTensor(packed, (n, d), out_params)


# ------------------------------------------------------------------- bench


@dataclass
class BenchRow:
    name: str
    bits: int
    fused: bool
    median_ns: float
    p10_ns: float
    p90_ns: float
    speedup: float      # vs the FP32 aggregation baseline
    samples: int


@dataclass
class BenchReport:
    rows: list
    n: int
    d: int
    k: int
    r: int
    deg: int
    reps: int
    warmup: int
    low_confidence: bool = False

    def row(self, name: str) -> BenchRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise InputError(f"no bench row named {name!r}")


def _time_loop(fn, reps: int, warmup: int) -> np.ndarray:
    for _ in range(warmup):
        fn()
    samples = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        samples[i] = time.perf_counter_ns() - t0
    return samples


def _timer_resolution_ns() -> float:
    deltas = []
    for _ in range(50):
        a = time.perf_counter_ns()
        b = time.perf_counter_ns()
        while b == a:
            b = time.perf_counter_ns()
        deltas.append(b - a)
    return float(np.median(deltas))


def bench(g: Graph, d: int = 128, k: int = 20, r: int = 2, bits=(8, 4),
          reps: int = 30, warmup: int = 5, tile_rows: int = 64,
          seed: int = 0) -> BenchReport:
    """Latency comparison on one graph: FP32 aggregation baseline, integer
    aggregation per bit-width, and the unfused vs fused prompt pipeline at
    the first listed bit-width."""
    if reps < 30:
        raise InputError("need at least 30 repetitions")
    rng = stream(seed, "bench.features")
    n = g.num_nodes
    x = rng.normal(size=(n, d))
    x32 = x.astype(np.float32)
    from .prompts import init_prompt_bank
    bank = init_prompt_bank(1, k, r, d, mode="lorap", seed=seed)

    rows = []
    out32 = np.empty((n, d), dtype=np.float32)
    fp32_samples = _time_loop(
        lambda: _fastpath.agg_fp32(g.row_ptr, g.col_idx, x32, out32),
        reps, warmup)
    fp32_med = float(np.median(fp32_samples))

    def add_row(name, b, fused, samples):
        med = float(np.median(samples))
        rows.append(BenchRow(name, b, fused, med,
                             float(np.percentile(samples, 10)),
                             float(np.percentile(samples, 90)),
                             fp32_med / med if med > 0 else float("inf"),
                             len(samples)))

    add_row("fp32_agg", 32, False, fp32_samples)

    # kernel latency only: codes are unpacked and buffers allocated up front.
    # The aggregation rows compare like with like: float sums in FP32 against
    # integer accumulator sums, each in its native arithmetic; requantization
    # is timed where it runs, inside the prompt pipeline rows below.
    quantized = {}
    for b in bits:
        p_in = calibrate(x, b, signed=False)
        xq = quantize(x, p_in)
        codes = _input_codes(xq)
        p_out = calibrate(np.asarray(g.to_csr_matrix() @ x), b, signed=False)
        quantized[b] = (p_in, codes, p_out)
        narrow = _lut_span(g, b) > 0
        acc_out = np.empty((n, d), dtype=np.int16 if narrow else np.int64)
        samples = _time_loop(
            lambda c=codes, z=p_in.zero_point, a=acc_out:
                _fastpath.agg_accumulators_int(g.row_ptr, g.col_idx, c, z, a),
            reps, warmup)
        add_row(f"int{b}_agg", b, False, samples)

    b0 = bits[0]
    p_in, codes, p_out = quantized[b0]
    phi_w, phi_b, p_a, p_b = _bank_arrays(bank, 0)
    # same full-size intermediates lorap_unfused materializes
    agg = np.empty((n, d), dtype=np.int64)
    shat = np.empty((n, d))
    logits = np.empty((n, k))
    out_q = np.empty((n, d), dtype=np.int64)

    def unfused_once():
        _agg_int_dispatch(g, codes, p_in, p_out, 1.0, agg)
        _fastpath.dequant_all(agg, p_out.scale, p_out.zero_point, shat)
        _fastpath.logits_all(shat, phi_w, phi_b, logits)
        _fastpath.softmax_all(logits)
        _fastpath.prompt_add_requant_all(shat, logits, p_a, p_b,
                                         p_out.scale, p_out.zero_point,
                                         p_out.q_min, p_out.q_max, out_q)

    add_row(f"int{b0}_lorap_unfused", b0, False,
            _time_loop(unfused_once, reps, warmup))

    plan = KernelPlan(b0, True, d, k, r, tile_rows)
    plan.check_scratch()
    ew = np.empty(0, dtype=np.float64)
    span = _lut_span(g, b0)

    def fused_once():
        _fastpath.fused_pipeline(g.row_ptr, g.col_idx, ew, codes,
                                 p_in.zero_point, p_in.scale, 1.0,
                                 p_out.scale, p_out.zero_point,
                                 p_out.q_min, p_out.q_max,
                                 phi_w, phi_b, p_a, p_b,
                                 p_out.scale, p_out.zero_point,
                                 p_out.q_min, p_out.q_max,
                                 plan.tile_rows, span, out_q)

    add_row(f"int{b0}_lorap_fused", b0, True,
            _time_loop(fused_once, reps, warmup))

    res = _timer_resolution_ns()
    low_conf = any(res > 0.01 * row.median_ns for row in rows)
    avg_deg = int(round(g.degree.mean())) if n else 0
    return BenchReport(rows, n, d, k, r, avg_deg, reps, warmup, low_conf)


_BENCH_HEADER = ("framework\tarch\tprompt\tk\tr\tseed\ttest_acc\ttrain_s\t"
                 "params_prompt\tmedian_ns\tp10_ns\tp90_ns\tspeedup")


def write_bench_tsv(report: BenchReport, fh, seed: int = 0) -> None:
    """Bench rows in the shared run-report format with latency columns."""
    from .prompts import param_count, init_prompt_bank
    fh.write(_BENCH_HEADER + "\n")
    for row in report.rows:
        prompt = "lorap" if "lorap" in row.name else "none"
        params = 0
        if prompt == "lorap":
            bank = init_prompt_bank(1, report.k, report.r, report.d)
            params = param_count(bank)["total"]
        fh.write(f"{row.name}\tkernel\t{prompt}\t{report.k}\t{report.r}\t{seed}\t"
                 f"nan\t0.0\t{params}\t{row.median_ns:.1f}\t{row.p10_ns:.1f}\t"
                 f"{row.p90_ns:.1f}\t{row.speedup:.4f}\n")
