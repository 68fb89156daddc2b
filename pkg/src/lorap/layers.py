"""Message passing layers: aggregation in sum/mean/max modes, GCN and GIN
forward passes with optional fake-quantization and prompt injection, and the
exact manual reverse pass for all of it.

Conventions:

* activations and aggregations use unsigned asymmetric quantization with EMA
  range tracking, weights use symmetric signed quantization calibrated from
  their current values each step;
* biases stay in full precision;
* the final layer of a model skips ReLU and output requantization, so its
  output is usable as classifier logits;
* rows flagged in ``protect`` bypass activation/aggregation fake-quantization
  for that forward pass (degree-based protection lives in the trainer).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _fastpath, prompts
from .errors import InputError, StateError
from .graphs import Graph
from .quant import (RangeTracker, calibrate, fake_quantize, ste_mask,
                    track_range, tracker_params)
from .rng import stream

AGG_MODES = ("sum", "mean", "max")


@dataclass
class LayerParams:
    """One layer's trainable parameters.  GCN uses weight/bias; GIN uses
    gin_eps plus a two-layer MLP."""

    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    gin_eps: float = 0.0
    gin_mlp: list[tuple[np.ndarray, np.ndarray]] | None = None


def init_gcn_layer(d_in: int, d_out: int, seed: int = 0, tag: str = "") -> LayerParams:
    rng = stream(seed, f"layer.gcn.{tag}")
    lim = np.sqrt(6.0 / (d_in + d_out))  # Glorot uniform
    return LayerParams(weight=rng.uniform(-lim, lim, size=(d_in, d_out)),
                       bias=np.zeros(d_out))


def init_gin_layer(d_in: int, d_hidden: int, d_out: int, seed: int = 0,
                   tag: str = "") -> LayerParams:
    rng = stream(seed, f"layer.gin.{tag}")
    lim1 = np.sqrt(6.0 / (d_in + d_hidden))
    lim2 = np.sqrt(6.0 / (d_hidden + d_out))
    return LayerParams(
        gin_eps=0.0,
        gin_mlp=[(rng.uniform(-lim1, lim1, size=(d_in, d_hidden)), np.zeros(d_hidden)),
                 (rng.uniform(-lim2, lim2, size=(d_hidden, d_out)), np.zeros(d_out))])


# ------------------------------------------------------------- aggregation


@dataclass
class AggTape:
    mode: str
    argmax: np.ndarray | None = None   # (N, d) source indices, max mode only


def aggregate(g: Graph, x: np.ndarray, mode: str = "sum", return_tape: bool = False):
    """Neighborhood reduction per node.  sum/mean respect edge weights; max
    ignores them and breaks ties toward the lowest neighbor index."""
    if mode not in AGG_MODES:
        raise InputError(f"unknown aggregation mode {mode!r}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != g.num_nodes:
        raise InputError(f"feature rows {x.shape} do not match num_nodes {g.num_nodes}")
    if mode == "max":
        out = np.empty_like(x)
        arg = np.empty(x.shape, dtype=np.int64)
        _fastpath.max_aggregate(g.row_ptr, g.col_idx, x, out, arg)
        tape = AggTape("max", arg)
        return (out, tape) if return_tape else out
    a = g.to_csr_matrix()
    out = np.asarray(a @ x)
    if mode == "mean":
        deg = np.maximum(g.degree, 1).astype(np.float64)
        out = out / deg[:, None]
    tape = AggTape(mode)
    return (out, tape) if return_tape else out


def aggregate_backward(g: Graph, grad_out: np.ndarray, mode: str,
                       tape: AggTape | None = None) -> np.ndarray:
    """Exact adjoint of aggregate: transpose-scatter for sum/mean, argmax
    routing for max."""
    if mode not in AGG_MODES:
        raise InputError(f"unknown aggregation mode {mode!r}")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if mode == "max":
        if tape is None or tape.argmax is None:
            raise StateError("max aggregation backward needs the forward tape")
        grad_in = np.zeros_like(grad_out)
        arg = tape.argmax
        hit = arg >= 0
        rows, cols = np.nonzero(hit)
        np.add.at(grad_in, (arg[rows, cols], cols), grad_out[rows, cols])
        return grad_in
    a = g.to_csr_matrix()
    if mode == "mean":
        deg = np.maximum(g.degree, 1).astype(np.float64)
        grad_out = grad_out / deg[:, None]
    return np.asarray(a.T @ grad_out)


# ----------------------------------------------------------- quantized state


@dataclass
class QuantState:
    """Mutable EMA range trackers for one model.  ``input`` covers the raw
    features; per layer, ``agg`` covers the aggregation and ``out`` the
    post-ReLU activations (unused on the final layer)."""

    bits_w: int
    bits_a: int
    num_layers: int
    clip_percentile: float | None = None
    input: RangeTracker = None
    agg: list = None
    out: list = None
    hidden: list = None   # GIN only: MLP hidden activation trackers

    def __post_init__(self):
        cp = self.clip_percentile
        if self.input is None:
            self.input = RangeTracker(clip_percentile=cp)
        if self.agg is None:
            self.agg = [RangeTracker(clip_percentile=cp) for _ in range(self.num_layers)]
        if self.out is None:
            self.out = [RangeTracker(clip_percentile=cp) for _ in range(self.num_layers)]
        if self.hidden is None:
            self.hidden = [RangeTracker(clip_percentile=cp) for _ in range(self.num_layers)]


def _fq_activation(values, trackers, idx, qs: QuantState, update: bool,
                   protect: np.ndarray | None):
    """Track-then-fake-quantize an activation tensor; protected rows pass
    through unchanged.  Returns (values_out, ste row mask or None, params)."""
    obs = values if protect is None else values[~protect]
    if update:
        trackers[idx] = track_range(trackers[idx], obs)
    p = tracker_params(trackers[idx], qs.bits_a, signed=False)
    mask = ste_mask(values, p)
    out = fake_quantize(values, p)
    if protect is not None and protect.any():
        out = np.where(protect[:, None], values, out)
        mask = np.where(protect[:, None], 1.0, mask)
    return out, mask, p


def _fq_weight(w, qs: QuantState):
    p = calibrate(w, qs.bits_w, signed=True)
    return fake_quantize(w, p), ste_mask(w, p)


def quantize_input(x, qs: QuantState | None, update: bool = True,
                   protect: np.ndarray | None = None):
    """Fake-quantize the raw feature matrix (first quantization point)."""
    x = np.asarray(x, dtype=np.float64)
    if qs is None:
        return x, None
    obs = x if protect is None else x[~protect]
    if update:
        qs.input = track_range(qs.input, obs)
    p = tracker_params(qs.input, qs.bits_a, signed=False)
    mask = ste_mask(x, p)
    out = fake_quantize(x, p)
    if protect is not None and protect.any():
        out = np.where(protect[:, None], x, out)
        mask = np.where(protect[:, None], 1.0, mask)
    return out, mask


# ------------------------------------------------------------------ layers


@dataclass
class LayerTape:
    arch: str
    x_in: np.ndarray            # layer input as consumed (already fake-quantized)
    agg_tape: AggTape
    s_raw: np.ndarray           # aggregation before fake-quant
    s_mask: np.ndarray | None   # STE mask of the aggregation fake-quant
    s_used: np.ndarray          # aggregation after fake-quant and prompt
    inject_tape: object | None
    w_used: np.ndarray | None = None
    w_mask: np.ndarray | None = None
    z: np.ndarray | None = None          # pre-activation
    out_mask: np.ndarray | None = None   # STE mask of the output fake-quant
    last: bool = False
    # GIN extras
    combined: np.ndarray | None = None
    mlp_w_used: list | None = None
    mlp_w_mask: list | None = None
    h1_raw: np.ndarray | None = None
    h1_mask: np.ndarray | None = None
    h1_used: np.ndarray | None = None


def _prompt_layer(s_hat, bank, layer, agg_params, protect, return_tape):
    quant_rows = None
    if agg_params is not None and protect is not None:
        quant_rows = ~protect
    return prompts.inject_on_values(s_hat, bank, layer, agg_params,
                                    quant_rows=quant_rows, return_tape=return_tape)


def _maybe_inject(s_hat, bank, layer, agg_params, protect):
    """Prompt hook: inject only when the bank is active and its width matches
    this layer's aggregation width."""
    if bank is None or bank.mode not in prompts.POST_AGG_MODES:
        return s_hat, None
    if s_hat.shape[1] != bank.feature_dim:
        return s_hat, None
    return _prompt_layer(s_hat, bank, layer, agg_params, protect, True)


def gcn_forward(g: Graph, x: np.ndarray, p: LayerParams, layer: int = 0,
                qs: QuantState | None = None, bank=None,
                mode: str = "sum", last: bool = False, update: bool = True,
                protect: np.ndarray | None = None):
    """One graph-convolution layer: aggregate, optionally prompt, linear map,
    ReLU (skipped when ``last``).  Returns (output, LayerTape)."""
    x = np.asarray(x, dtype=np.float64)
    if p.weight is None:
        raise InputError("gcn_forward needs weight/bias params")
    if x.shape[1] != p.weight.shape[0]:
        raise InputError(f"input width {x.shape[1]} does not match weight "
                         f"{p.weight.shape}")
    s_raw, agg_tape = aggregate(g, x, mode, return_tape=True)
    if qs is not None:
        s_hat, s_mask, agg_p = _fq_activation(s_raw, qs.agg, layer, qs, update, protect)
    else:
        s_hat, s_mask, agg_p = s_raw, None, None
    s_used, inj_tape = _maybe_inject(s_hat, bank, layer, agg_p, protect)
    if qs is not None:
        w_used, w_mask = _fq_weight(p.weight, qs)
    else:
        w_used, w_mask = p.weight, None
    z = s_used @ w_used + p.bias
    if last:
        out, out_mask = z, None
    else:
        out = np.maximum(z, 0.0)
        if qs is not None:
            out, out_mask, _ = _fq_activation(out, qs.out, layer, qs, update, protect)
        else:
            out_mask = None
    tape = LayerTape("gcn", x, agg_tape, s_raw, s_mask, s_used, inj_tape,
                     w_used=w_used, w_mask=w_mask, z=z, out_mask=out_mask, last=last)
    return out, tape


def gin_forward(g: Graph, x: np.ndarray, p: LayerParams, layer: int = 0,
                qs: QuantState | None = None, bank=None,
                last: bool = False, update: bool = True,
                protect: np.ndarray | None = None):
    """One GIN layer: MLP((1 + eps) * x + sum-aggregate(x)); quantization and
    prompting hit the aggregated matrix exactly as in gcn_forward."""
    x = np.asarray(x, dtype=np.float64)
    if p.gin_mlp is None:
        raise InputError("gin_forward needs the two-layer MLP params")
    if x.shape[1] != p.gin_mlp[0][0].shape[0]:
        raise InputError("input width does not match MLP")
    s_raw, agg_tape = aggregate(g, x, "sum", return_tape=True)
    if qs is not None:
        s_hat, s_mask, agg_p = _fq_activation(s_raw, qs.agg, layer, qs, update, protect)
    else:
        s_hat, s_mask, agg_p = s_raw, None, None
    s_used, inj_tape = _maybe_inject(s_hat, bank, layer, agg_p, protect)
    combined = (1.0 + p.gin_eps) * x + s_used
    if qs is not None:
        mlp_w = []
        mlp_m = []
        for w, _ in p.gin_mlp:
            wq, wm = _fq_weight(w, qs)
            mlp_w.append(wq)
            mlp_m.append(wm)
    else:
        mlp_w = [w for w, _ in p.gin_mlp]
        mlp_m = None
    h1_raw = combined @ mlp_w[0] + p.gin_mlp[0][1]
    h1 = np.maximum(h1_raw, 0.0)
    if qs is not None:
        h1, h1_mask, _ = _fq_activation(h1, qs.hidden, layer, qs, update, protect)
    else:
        h1_mask = None
    z = h1 @ mlp_w[1] + p.gin_mlp[1][1]
    if last:
        out, out_mask = z, None
    else:
        out = np.maximum(z, 0.0)
        if qs is not None:
            out, out_mask, _ = _fq_activation(out, qs.out, layer, qs, update, protect)
        else:
            out_mask = None
    tape = LayerTape("gin", x, agg_tape, s_raw, s_mask, s_used, inj_tape,
                     z=z, out_mask=out_mask, last=last, combined=combined,
                     mlp_w_used=mlp_w, mlp_w_mask=mlp_m, h1_raw=h1_raw,
                     h1_mask=h1_mask, h1_used=h1)
    return out, tape


# ----------------------------------------------------------------- backward


@dataclass
class LayerGrads:
    d_weight: np.ndarray | None = None
    d_bias: np.ndarray | None = None
    d_gin_eps: float = 0.0
    d_gin_mlp: list | None = None


def _layer_backward(g: Graph, p: LayerParams, tape: LayerTape, grad_out,
                    bank, layer: int, mode: str):
    """Reverse one layer; returns (LayerGrads, prompt grads or None, grad
    wrt the layer input)."""
    gr = np.asarray(grad_out, dtype=np.float64)
    if not tape.last:
        if tape.out_mask is not None:
            gr = gr * tape.out_mask
        gr = gr * (tape.z > 0)
    g_comb = None
    if tape.arch == "gcn":
        lg = LayerGrads(
            d_weight=tape.s_used.T @ gr,
            d_bias=gr.sum(axis=0))
        if tape.w_mask is not None:
            lg.d_weight = lg.d_weight * tape.w_mask
        g_s = gr @ tape.w_used.T
    else:
        g_h1 = gr @ tape.mlp_w_used[1].T
        d_w2 = tape.h1_used.T @ gr
        d_b2 = gr.sum(axis=0)
        if tape.h1_mask is not None:
            g_h1 = g_h1 * tape.h1_mask
        g_h1 = g_h1 * (tape.h1_raw > 0)
        d_w1 = tape.combined.T @ g_h1
        d_b1 = g_h1.sum(axis=0)
        if tape.mlp_w_mask is not None:
            d_w1 = d_w1 * tape.mlp_w_mask[0]
            d_w2 = d_w2 * tape.mlp_w_mask[1]
        g_comb = g_h1 @ tape.mlp_w_used[0].T
        lg = LayerGrads(
            d_gin_eps=float((g_comb * tape.x_in).sum()),
            d_gin_mlp=[(d_w1, d_b1), (d_w2, d_b2)])
        g_s = g_comb
    pgrads = None
    if tape.inject_tape is not None:
        pgrads = prompts.lorap_backward(g_s, tape.inject_tape, bank, layer)
        g_s = pgrads.grad_shat
    if tape.s_mask is not None:
        g_s = g_s * tape.s_mask
    agg_mode = "sum" if tape.arch == "gin" else mode
    grad_in = aggregate_backward(g, g_s, agg_mode, tape.agg_tape)
    if tape.arch == "gin":
        grad_in = grad_in + (1.0 + p.gin_eps) * g_comb
    return lg, pgrads, grad_in


def model_backward(g: Graph, layer_params: list, tapes: list, grad_loss,
                   bank=None, mode: str = "sum"):
    """Reverse the whole stack.  Returns (per-layer LayerGrads, accumulated
    prompt grads or None, gradient wrt the fake-quantized input features)."""
    if len(layer_params) != len(tapes):
        raise StateError(f"{len(tapes)} tapes for {len(layer_params)} layers")
    grads = [None] * len(tapes)
    acc = None
    gr = np.asarray(grad_loss, dtype=np.float64)
    for l in range(len(tapes) - 1, -1, -1):
        lg, pg, gr = _layer_backward(g, layer_params[l], tapes[l], gr, bank, l, mode)
        grads[l] = lg
        if pg is not None:
            if acc is None:
                acc = prompts.PromptGrads(
                    d_p_a=[np.zeros_like(a) for a in bank.p_a],
                    d_p_b=[np.zeros_like(b) for b in bank.p_b],
                    d_phi_w=np.zeros_like(bank.phi_weight),
                    d_phi_b=np.zeros_like(bank.phi_bias),
                    grad_shat=None)
            acc.d_p_a[l] += pg.d_p_a
            acc.d_p_b[l] += pg.d_p_b
            acc.d_phi_w += pg.d_phi_w
            acc.d_phi_b += pg.d_phi_b
    return grads, acc, gr
