"""Numba kernels shared by the prompt module and the fused/unfused pipelines.

Bit-exact equality between the fused and unfused paths is achieved by
routing every row through the same scalar helper functions in the same
order; tiling and intermediate materialization then cannot change a single
bit of the output.  All floating-point scratch is float64.
"""

import math

import numpy as np
from numba import njit

# ---------------------------------------------------------------- scalar bits


@njit(cache=True, inline="always")
def _rha(v):
    # round with ties away from zero; branch-free so the loops vectorize
    return math.copysign(math.floor(math.fabs(v) + 0.5), v)


@njit(cache=True, inline="always")
def _clip(v, lo, hi):
    return min(max(v, lo), hi)


# ------------------------------------------------------------- per-row steps


@njit(cache=True)
def _agg_row_codes_int(codes, row_ptr, col_idx, i, z_in, s_in, w_uniform,
                       s_out, z_out, q_min, q_max, acc, out_row):
    """Integer-accumulated sum aggregation of one row, requantized."""
    d = codes.shape[1]
    for j in range(d):
        acc[j] = 0
    deg = 0
    for e in range(row_ptr[i], row_ptr[i + 1]):
        src = col_idx[e]
        for j in range(d):
            acc[j] += codes[src, j]
        deg += 1
    ratio = s_in * w_uniform / s_out
    for j in range(d):
        acc[j] -= deg * z_in
        out_row[j] = _clip(_rha(acc[j] * ratio) + z_out, q_min, q_max)


@njit(cache=True)
def _agg_row_codes_float(codes, row_ptr, col_idx, ew, i, z_in, s_in,
                         s_out, z_out, q_min, q_max, facc, out_row):
    """FP64-accumulated weighted sum aggregation of one row, requantized."""
    d = codes.shape[1]
    for j in range(d):
        facc[j] = 0.0
    for e in range(row_ptr[i], row_ptr[i + 1]):
        src = col_idx[e]
        w = ew[e]
        for j in range(d):
            facc[j] += w * (codes[src, j] - z_in)
    for j in range(d):
        out_row[j] = _clip(_rha(s_in * facc[j] / s_out) + z_out, q_min, q_max)


@njit(cache=True)
def _build_requant_lut(span, ratio, z_out, q_min, q_max):
    """Requantized code for every reachable accumulator value in
    [-span, span].  Entry v+span holds exactly _clip(_rha(v*ratio)+z_out,
    ...), so table lookups match the arithmetic path bit for bit."""
    lut = np.empty(2 * span + 1, dtype=np.int16)
    for v in range(-span, span + 1):
        lut[v + span] = _clip(_rha(v * ratio) + z_out, q_min, q_max)
    return lut


@njit(cache=True)
def _agg_row_codes_i16(codes, row_ptr, col_idx, i, z_in, lut, span, acc,
                       out_row):
    """Narrow-accumulator variant of _agg_row_codes_int; callers must have
    checked that max_degree * max_code fits in int16.  The accumulated value
    is identical, so the requantized codes match bit for bit."""
    d = codes.shape[1]
    for j in range(d):
        acc[j] = 0
    deg = 0
    for e in range(row_ptr[i], row_ptr[i + 1]):
        src = col_idx[e]
        for j in range(d):
            acc[j] += codes[src, j]
        deg += 1
    base = span - deg * z_in
    for j in range(d):
        out_row[j] = lut[acc[j] + base]


@njit(cache=True)
def _dequant_row(codes_row, s, z, shat_row):
    for j in range(codes_row.shape[0]):
        shat_row[j] = s * (codes_row[j] - z)


@njit(cache=True)
def _logits_row(shat_row, phi_w, phi_b, logits_row):
    # j outer / m inner: the inner loop is elementwise over independent
    # logits, so it vectorizes without changing any summation order
    d = shat_row.shape[0]
    k = phi_b.shape[0]
    for m in range(k):
        logits_row[m] = phi_b[m]
    for j in range(d):
        aj = shat_row[j]
        for m in range(k):
            logits_row[m] += aj * phi_w[j, m]


@njit(cache=True)
def _softmax_row(v):
    k = v.shape[0]
    hi = v[0]
    for m in range(1, k):
        if v[m] > hi:
            hi = v[m]
    total = 0.0
    for m in range(k):
        v[m] = math.exp(v[m] - hi)
        total += v[m]
    for m in range(k):
        v[m] /= total


@njit(cache=True)
def _prompt_add_row(alpha_row, p_a, p_b, t, shat_row):
    k, r = p_a.shape
    d = p_b.shape[1]
    for q in range(r):
        acc = 0.0
        for m in range(k):
            acc += alpha_row[m] * p_a[m, q]
        t[q] = acc
    for j in range(d):
        acc = 0.0
        for q in range(r):
            acc += t[q] * p_b[q, j]
        shat_row[j] += acc


@njit(cache=True)
def _requant_row(shat_row, s, z, q_min, q_max, out_row):
    for j in range(shat_row.shape[0]):
        out_row[j] = _clip(_rha(shat_row[j] / s) + z, q_min, q_max)


# ----------------------------------------------------- full-matrix (unfused)


@njit(cache=True)
def agg_codes_int(row_ptr, col_idx, codes, z_in, s_in, w_uniform,
                  s_out, z_out, q_min, q_max, out):
    n, d = out.shape
    acc = np.empty(d, dtype=np.int64)
    for i in range(n):
        _agg_row_codes_int(codes, row_ptr, col_idx, i, z_in, s_in, w_uniform,
                           s_out, z_out, q_min, q_max, acc, out[i])


@njit(cache=True)
def agg_codes_i16(row_ptr, col_idx, codes, z_in, s_in, w_uniform,
                  s_out, z_out, q_min, q_max, span, out):
    n, d = out.shape
    acc = np.empty(d, dtype=np.int16)
    lut = _build_requant_lut(span, s_in * w_uniform / s_out, z_out,
                             q_min, q_max)
    for i in range(n):
        _agg_row_codes_i16(codes, row_ptr, col_idx, i, z_in, lut, span, acc,
                           out[i])


@njit(cache=True)
def agg_codes_float(row_ptr, col_idx, ew, codes, z_in, s_in,
                    s_out, z_out, q_min, q_max, out):
    n, d = out.shape
    facc = np.empty(d, dtype=np.float64)
    for i in range(n):
        _agg_row_codes_float(codes, row_ptr, col_idx, ew, i, z_in, s_in,
                             s_out, z_out, q_min, q_max, facc, out[i])


@njit(cache=True)
def agg_accumulators_int(row_ptr, col_idx, codes, z_in, acc_out):
    """Raw integer accumulators sum_j (code_j - Z), one full row per node."""
    n, d = acc_out.shape
    for i in range(n):
        for j in range(d):
            acc_out[i, j] = 0
        deg = 0
        for e in range(row_ptr[i], row_ptr[i + 1]):
            src = col_idx[e]
            for j in range(d):
                acc_out[i, j] += codes[src, j]
            deg += 1
        for j in range(d):
            acc_out[i, j] -= deg * z_in


@njit(cache=True)
def dequant_all(codes, s, z, shat):
    for i in range(codes.shape[0]):
        _dequant_row(codes[i], s, z, shat[i])


@njit(cache=True)
def logits_all(shat, phi_w, phi_b, logits):
    for i in range(shat.shape[0]):
        _logits_row(shat[i], phi_w, phi_b, logits[i])


@njit(cache=True)
def softmax_all(logits):
    for i in range(logits.shape[0]):
        _softmax_row(logits[i])


@njit(cache=True)
def prompt_add_requant_all(shat, alpha, p_a, p_b, s_out, z_out,
                           q_min, q_max, out):
    r = p_a.shape[1]
    t = np.empty(r, dtype=np.float64)
    for i in range(shat.shape[0]):
        _prompt_add_row(alpha[i], p_a, p_b, t, shat[i])
        _requant_row(shat[i], s_out, z_out, q_min, q_max, out[i])


# ------------------------------------------------------------------- fused


@njit(cache=True)
def fused_pipeline(row_ptr, col_idx, ew, codes, z_in, s_in, w_uniform,
                   s_agg, z_agg, qmin_agg, qmax_agg,
                   phi_w, phi_b, p_a, p_b,
                   s_out, z_out, qmin_out, qmax_out,
                   tile_rows, lut_span, out):
    """Aggregate -> dequantize -> prompt -> requantize, one pass per tile.

    Scratch never exceeds tile_rows*(d+k) + r floats plus the per-row
    integer accumulator and aggregated-code rows.  ``ew`` of length zero
    selects the integer uniform-weight path.
    """
    n, d = out.shape
    k = phi_b.shape[0]
    r = p_a.shape[1]
    acc = np.empty(d, dtype=np.int64)
    acc16 = np.empty(d, dtype=np.int16)
    lut = _build_requant_lut(lut_span, s_in * w_uniform / s_agg, z_agg,
                             qmin_agg, qmax_agg) if lut_span > 0 \
        else np.empty(0, dtype=np.int16)
    facc = np.empty(d, dtype=np.float64)
    agg_row = np.empty(d, dtype=np.int64)
    shat = np.empty((tile_rows, d), dtype=np.float64)
    logits = np.empty((tile_rows, k), dtype=np.float64)
    t = np.empty(r, dtype=np.float64)
    weighted = ew.shape[0] != 0
    for tile0 in range(0, n, tile_rows):
        tile1 = min(tile0 + tile_rows, n)
        for i in range(tile0, tile1):
            ti = i - tile0
            if weighted:
                _agg_row_codes_float(codes, row_ptr, col_idx, ew, i, z_in, s_in,
                                     s_agg, z_agg, qmin_agg, qmax_agg, facc, agg_row)
            elif lut_span > 0:
                _agg_row_codes_i16(codes, row_ptr, col_idx, i, z_in, lut,
                                   lut_span, acc16, agg_row)
            else:
                _agg_row_codes_int(codes, row_ptr, col_idx, i, z_in, s_in, w_uniform,
                                   s_agg, z_agg, qmin_agg, qmax_agg, acc, agg_row)
            _dequant_row(agg_row, s_agg, z_agg, shat[ti])
            _logits_row(shat[ti], phi_w, phi_b, logits[ti])
            _softmax_row(logits[ti])
            _prompt_add_row(logits[ti], p_a, p_b, t, shat[ti])
            _requant_row(shat[ti], s_out, z_out, qmin_out, qmax_out, out[i])


# ------------------------------------------------- injection with full tape


@njit(cache=True)
def inject_with_tape(codes, s_in, z_in, phi_w, phi_b, p_a, p_b,
                     s_out, z_out, q_min, q_max,
                     out, shat, alpha, pre_q):
    """Prompt injection over already-aggregated codes, keeping the
    intermediates (dequantized input, softmax weights, pre-quantization
    values) that the backward pass needs."""
    n, d = codes.shape
    r = p_a.shape[1]
    t = np.empty(r, dtype=np.float64)
    for i in range(n):
        _dequant_row(codes[i], s_in, z_in, shat[i])
        _logits_row(shat[i], phi_w, phi_b, alpha[i])
        _softmax_row(alpha[i])
        for j in range(d):
            pre_q[i, j] = shat[i, j]
        _prompt_add_row(alpha[i], p_a, p_b, t, pre_q[i])
        _requant_row(pre_q[i], s_out, z_out, q_min, q_max, out[i])


# ------------------------------------------------------------ misc kernels


@njit(cache=True)
def agg_fp32(row_ptr, col_idx, x, out):
    """FP32 sum aggregation baseline (unweighted)."""
    n, d = out.shape
    for i in range(n):
        for j in range(d):
            out[i, j] = np.float32(0.0)
        for e in range(row_ptr[i], row_ptr[i + 1]):
            src = col_idx[e]
            for j in range(d):
                out[i, j] += x[src, j]


@njit(cache=True)
def max_aggregate(row_ptr, col_idx, x, out, arg):
    """Per-row max over neighbors; ties keep the lowest neighbor index
    (CSR order is ascending).  Empty rows give 0 with arg -1."""
    n = row_ptr.shape[0] - 1
    d = x.shape[1]
    for i in range(n):
        lo, hi = row_ptr[i], row_ptr[i + 1]
        if lo == hi:
            for j in range(d):
                out[i, j] = 0.0
                arg[i, j] = -1
            continue
        src0 = col_idx[lo]
        for j in range(d):
            out[i, j] = x[src0, j]
            arg[i, j] = src0
        for e in range(lo + 1, hi):
            src = col_idx[e]
            for j in range(d):
                if x[src, j] > out[i, j]:
                    out[i, j] = x[src, j]
                    arg[i, j] = src
