"""Prompting strategies: shared-vector node prompts, input-dependent node
prompts (pre-aggregation), and low-rank post-aggregation injection with its
exact backward pass.

The post-aggregation injection works on a quantized aggregation: dequantize,
map each row through a shared affine function and a softmax to mixing
weights, add the resulting convex combination of low-rank basis rows, and
requantize.  All prompt arithmetic runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _fastpath
from .errors import InputError, StateError
from .quant import (QuantParams, QuantizedTensor, pack_codes, quantize_codes,
                    dequantize_codes, ste_mask, tensor_codes)
from .rng import stream

MODES = ("none", "gpf", "gpf_plus", "lorap", "gpf_lorap")
POST_AGG_MODES = ("lorap", "gpf_lorap")


@dataclass
class PromptBank:
    """Per-layer low-rank prompt bases plus the shared mixing map.

    p_a[l] is (k, r), p_b[l] is (r, d); the basis matrix of layer l is their
    product.  phi_weight/phi_bias are shared by every layer.
    """

    num_layers: int
    num_bases: int      # k
    rank: int           # r
    feature_dim: int    # d
    p_a: list[np.ndarray]
    p_b: list[np.ndarray]
    phi_weight: np.ndarray   # (d, k)
    phi_bias: np.ndarray     # (k,)
    mode: str = "lorap"

    def __post_init__(self):
        if self.mode not in MODES:
            raise InputError(f"unknown prompt mode {self.mode!r}")
        if self.rank > min(self.num_bases, self.feature_dim):
            raise InputError("rank must not exceed min(num_bases, feature_dim)")
        if len(self.p_a) != self.num_layers or len(self.p_b) != self.num_layers:
            raise InputError("need one factor pair per layer")
        for a, b in zip(self.p_a, self.p_b):
            if a.shape != (self.num_bases, self.rank) or b.shape != (self.rank, self.feature_dim):
                raise InputError("factor shape mismatch")
        if self.phi_weight.shape != (self.feature_dim, self.num_bases):
            raise InputError("phi_weight shape mismatch")
        if self.phi_bias.shape != (self.num_bases,):
            raise InputError("phi_bias shape mismatch")


def init_prompt_bank(num_layers: int, k: int, r: int, d: int,
                     mode: str = "lorap", seed: int = 0) -> PromptBank:
    """Small uniform init keeps early prompts near zero, so training starts
    from the unprompted model."""
    rng = stream(seed, "prompt.bank")
    lim = 1.0 / np.sqrt(d)
    p_a = [rng.uniform(-lim, lim, size=(k, r)) for _ in range(num_layers)]
    p_b = [rng.uniform(-lim, lim, size=(r, d)) for _ in range(num_layers)]
    phi_w = rng.uniform(-lim, lim, size=(d, k))
    phi_b = np.zeros(k)
    return PromptBank(num_layers, k, r, d, p_a, p_b, phi_w, phi_b, mode)


@dataclass
class NodePrompt:
    """Pre-aggregation node prompt: a shared vector (gpf) or the
    input-dependent softmax-mixture mirror of the post-aggregation bank
    (gpf_plus)."""

    mode: str
    feature_dim: int
    shared_vector: np.ndarray | None = None
    p_a: np.ndarray | None = None        # (k, r)
    p_b: np.ndarray | None = None        # (r, d)
    phi_weight: np.ndarray | None = None  # (d, k)
    phi_bias: np.ndarray | None = None   # (k,)

    def __post_init__(self):
        if self.mode not in ("gpf", "gpf_plus"):
            raise InputError(f"unknown node prompt mode {self.mode!r}")
        if self.mode == "gpf":
            if self.shared_vector is None or self.shared_vector.shape != (self.feature_dim,):
                raise InputError("gpf needs a shared vector of length feature_dim")
        else:
            for name in ("p_a", "p_b", "phi_weight", "phi_bias"):
                if getattr(self, name) is None:
                    raise InputError(f"gpf_plus needs {name}")


def init_node_prompt(mode: str, d: int, k: int = 1, r: int = 1, seed: int = 0) -> NodePrompt:
    rng = stream(seed, "prompt.node")
    if mode == "gpf":
        return NodePrompt("gpf", d, shared_vector=np.zeros(d))
    lim = 1.0 / np.sqrt(d)
    return NodePrompt("gpf_plus", d,
                      p_a=rng.uniform(-lim, lim, size=(k, r)),
                      p_b=rng.uniform(-lim, lim, size=(r, d)),
                      phi_weight=rng.uniform(-lim, lim, size=(d, k)),
                      phi_bias=np.zeros(k))


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class NodePromptTape:
    x: np.ndarray
    alpha: np.ndarray | None


def gpf_apply(x: np.ndarray, p: NodePrompt, return_tape: bool = False):
    """Add the node prompt to every feature row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.feature_dim:
        raise InputError(f"feature width {x.shape} does not match prompt dim {p.feature_dim}")
    if p.mode == "gpf":
        out = x + p.shared_vector
        tape = NodePromptTape(x, None)
    else:
        alpha = _softmax_rows(x @ p.phi_weight + p.phi_bias)
        out = x + alpha @ (p.p_a @ p.p_b)
        tape = NodePromptTape(x, alpha)
    return (out, tape) if return_tape else out


@dataclass
class NodePromptGrads:
    grad_x: np.ndarray
    d_shared: np.ndarray | None = None
    d_p_a: np.ndarray | None = None
    d_p_b: np.ndarray | None = None
    d_phi_w: np.ndarray | None = None
    d_phi_b: np.ndarray | None = None


def gpf_backward(grad_out: np.ndarray, tape: NodePromptTape, p: NodePrompt) -> NodePromptGrads:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if p.mode == "gpf":
        return NodePromptGrads(grad_x=grad_out.copy(), d_shared=grad_out.sum(axis=0))
    alpha = tape.alpha
    bases = p.p_a @ p.p_b
    d_bases = alpha.T @ grad_out
    d_alpha = grad_out @ bases.T
    d_logits = alpha * (d_alpha - (d_alpha * alpha).sum(axis=1, keepdims=True))
    return NodePromptGrads(
        grad_x=grad_out + d_logits @ p.phi_weight.T,
        d_p_a=d_bases @ p.p_b.T,
        d_p_b=p.p_a.T @ d_bases,
        d_phi_w=tape.x.T @ d_logits,
        d_phi_b=d_logits.sum(axis=0))


def lorap_bases(bank: PromptBank, layer: int) -> np.ndarray:
    """Basis matrix (k, d) of one layer: the product of its low-rank factors."""
    if not 0 <= layer < bank.num_layers:
        raise InputError(f"layer {layer} out of range for L={bank.num_layers}")
    return bank.p_a[layer] @ bank.p_b[layer]


@dataclass
class InjectTape:
    shat: np.ndarray          # dequantized aggregation (N, d)
    alpha: np.ndarray         # softmax mixing weights (N, k)
    pre_q: np.ndarray         # shat + prompt, before requantization
    out_params: QuantParams | None
    quant_rows: np.ndarray | None   # bool rows that were requantized (None = all)
    layer: int


def lorap_inject(s_q: QuantizedTensor, bank: PromptBank, layer: int,
                 out_params: QuantParams, return_tape: bool = False):
    """Inject low-rank prompts into a quantized aggregation and requantize.

    Runs on the same per-row kernel as the fused/unfused pipelines, so the
    output is bit-identical to theirs for identical inputs.
    """
    if bank.mode not in POST_AGG_MODES:
        raise InputError(f"bank mode {bank.mode!r} has no post-aggregation prompts")
    if not 0 <= layer < bank.num_layers:
        raise InputError(f"layer {layer} out of range for L={bank.num_layers}")
    if len(s_q.shape) != 2 or s_q.shape[1] != bank.feature_dim:
        raise InputError(f"aggregation shape {s_q.shape} does not match bank dim "
                         f"{bank.feature_dim}")
    codes = np.ascontiguousarray(tensor_codes(s_q))
    n, d = codes.shape
    p_in = s_q.params
    out = np.empty((n, d), dtype=np.int64)
    shat = np.empty((n, d))
    alpha = np.empty((n, bank.num_bases))
    pre_q = np.empty((n, d))
    _fastpath.inject_with_tape(
        codes, p_in.scale, p_in.zero_point,
        np.ascontiguousarray(bank.phi_weight), np.ascontiguousarray(bank.phi_bias),
        np.ascontiguousarray(bank.p_a[layer]), np.ascontiguousarray(bank.p_b[layer]),
        out_params.scale, out_params.zero_point, out_params.q_min, out_params.q_max,
        out, shat, alpha, pre_q)
    packed = pack_codes((out - out_params.q_min).ravel(), out_params.bits)
    result = QuantizedTensor(packed, (n, d), out_params)
    if not return_tape:
        return result
    return result, InjectTape(shat, alpha, pre_q, out_params, None, layer)


def inject_on_values(shat: np.ndarray, bank: PromptBank, layer: int,
                     out_params: QuantParams | None = None,
                     quant_rows: np.ndarray | None = None,
                     return_tape: bool = False):
    """Value-level injection used inside training: takes the dequantized
    aggregation, returns prompted values with requantization applied to
    ``quant_rows`` (all rows by default, none when out_params is None)."""
    if bank.mode not in POST_AGG_MODES:
        raise InputError(f"bank mode {bank.mode!r} has no post-aggregation prompts")
    shat = np.asarray(shat, dtype=np.float64)
    if shat.ndim != 2 or shat.shape[1] != bank.feature_dim:
        raise InputError("aggregation width does not match bank dim")
    alpha = _softmax_rows(shat @ bank.phi_weight + bank.phi_bias)
    pre_q = shat + alpha @ lorap_bases(bank, layer)
    if out_params is None:
        out = pre_q.copy()
        quant_rows = np.zeros(shat.shape[0], dtype=bool)
    else:
        if quant_rows is None:
            quant_rows = np.ones(shat.shape[0], dtype=bool)
        out = pre_q.copy()
        out[quant_rows] = dequantize_codes(
            quantize_codes(pre_q[quant_rows], out_params), out_params)
    tape = InjectTape(shat, alpha, pre_q, out_params, quant_rows, layer)
    return (out, tape) if return_tape else out


@dataclass
class PromptGrads:
    d_p_a: np.ndarray
    d_p_b: np.ndarray
    d_phi_w: np.ndarray
    d_phi_b: np.ndarray
    grad_shat: np.ndarray


def lorap_backward(grad_out: np.ndarray, tape: InjectTape,
                   bank: PromptBank, layer: int) -> PromptGrads:
    """Exact reverse pass of the injection; the requantization step passes
    gradients through the straight-through mask."""
    if tape is None:
        raise StateError("lorap_backward needs the tape from a matching forward")
    if layer != tape.layer:
        raise StateError(f"tape is for layer {tape.layer}, not {layer}")
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != tape.pre_q.shape:
        raise InputError("grad_out shape mismatch")
    if tape.out_params is not None:
        mask = ste_mask(tape.pre_q, tape.out_params)
        if tape.quant_rows is not None:
            mask = np.where(tape.quant_rows[:, None], mask, 1.0)
        g = g * mask
    bases = lorap_bases(bank, layer)
    d_bases = tape.alpha.T @ g
    d_alpha = g @ bases.T
    d_logits = tape.alpha * (d_alpha - (d_alpha * tape.alpha).sum(axis=1, keepdims=True))
    return PromptGrads(
        d_p_a=d_bases @ bank.p_b[layer].T,
        d_p_b=bank.p_a[layer].T @ d_bases,
        d_phi_w=tape.shat.T @ d_logits,
        d_phi_b=d_logits.sum(axis=0),
        grad_shat=g + d_logits @ bank.phi_weight.T)


def param_count(bank: PromptBank) -> dict:
    """Trainable parameter counts per component, plus the full-rank
    equivalent of the bases for comparison."""
    L, k, r, d = bank.num_layers, bank.num_bases, bank.rank, bank.feature_dim
    counts = {
        "bases": L * r * (k + d),
        "phi": d * k + k,
        "full_rank_bases": L * k * d,
    }
    counts["total"] = counts["bases"] + counts["phi"]
    return counts


def node_param_count(p: NodePrompt) -> dict:
    if p.mode == "gpf":
        return {"shared": p.feature_dim, "total": p.feature_dim}
    k, r = p.p_a.shape
    d = p.feature_dim
    counts = {"bases": r * (k + d), "phi": d * k + k}
    counts["total"] = counts["bases"] + counts["phi"]
    return counts
