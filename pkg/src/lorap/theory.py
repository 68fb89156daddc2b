"""Dense-matrix oracles for the error-correction theory behind
post-aggregation prompting.

Three results are made executable here:

1. correcting quantization error after aggregation decouples the objective
   from the graph operator (closed-form optimum, simple gradients), while
   pre-aggregation correction couples every node through A^T A;
2. a per-node prompt can cancel the systematic aggregation bias at a single
   target node only in the post-aggregation placement;
3. the best rank-limited correction of the end-to-end error matrix is
   governed by its tail singular values (Eckart-Young-Mirsky), and the
   realizing prompt is recoverable when the quantized weights have full
   column rank.

Everything works on small dense matrices in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericalError
from .quant import QuantParams, fake_quantize
from .rng import stream


@dataclass
class OracleInstance:
    a: np.ndarray            # N x N aggregation operator
    x: np.ndarray            # N x D features
    eps_x: np.ndarray        # N x D quantization error
    p: np.ndarray            # N x D prompt
    w_fp: np.ndarray | None = None
    w_q: np.ndarray | None = None
    rank_budget: int = 0

    def __post_init__(self):
        n = self.a.shape[0]
        if self.a.shape != (n, n):
            raise InputError("A must be square")
        for m in (self.x, self.eps_x, self.p):
            if m.shape != self.x.shape or m.shape[0] != n:
                raise InputError("X / eps_X / P shapes must agree with A")


def random_instance(n: int, d: int, seed: int = 0, with_weights: bool = False,
                    d_out: int | None = None) -> OracleInstance:
    rng = stream(seed, "theory.instance")
    inst = OracleInstance(
        a=rng.normal(size=(n, n)),
        x=rng.normal(size=(n, d)),
        eps_x=0.1 * rng.normal(size=(n, d)),
        p=rng.normal(size=(n, d)))
    if with_weights:
        d_out = d_out or d
        inst.w_fp = rng.normal(size=(d, d_out))
        inst.w_q = inst.w_fp + 0.05 * rng.normal(size=(d, d_out))
    return inst


# ------------------------------------------------- correction placement


def post_loss(inst: OracleInstance) -> float:
    """Squared Frobenius norm of the post-aggregation residual A*eps + P."""
    return float(np.linalg.norm(inst.a @ inst.eps_x + inst.p, "fro") ** 2)


def pre_loss(inst: OracleInstance) -> float:
    """Squared Frobenius norm of the pre-aggregation residual A*(eps + P)."""
    return float(np.linalg.norm(inst.a @ (inst.eps_x + inst.p), "fro") ** 2)


def post_grad(inst: OracleInstance) -> np.ndarray:
    return 2.0 * (inst.a @ inst.eps_x + inst.p)


def pre_grad(inst: OracleInstance) -> np.ndarray:
    return 2.0 * inst.a.T @ inst.a @ (inst.eps_x + inst.p)


def post_optimum(inst: OracleInstance) -> np.ndarray:
    """Closed-form minimizer of the post-aggregation loss."""
    return -inst.a @ inst.eps_x


# --------------------------------------------------- targeted correction


def targeted_residual(inst: OracleInstance, node: int) -> tuple[np.ndarray, np.ndarray]:
    """Residual row at one node under both placements.

    post: (A*eps)_i + P_i; pre: (A*eps)_i + (A*P)_i.  Setting P_i to the
    negated bias zeroes the post residual in expectation; the same per-node
    assignment cannot do so pre-aggregation because the prompt is mixed
    through the node's own neighborhood first.
    """
    n = inst.a.shape[0]
    if not 0 <= node < n:
        raise InputError(f"node {node} out of range for N={n}")
    ae = inst.a @ inst.eps_x
    post = ae[node] + inst.p[node]
    pre = ae[node] + (inst.a @ inst.p)[node]
    return post, pre


def star_graph_operator(num_leaves: int) -> np.ndarray:
    """Sum-aggregation operator of a star: node 0 is the hub, nodes 1..n are
    leaves; no self loops."""
    n = num_leaves + 1
    a = np.zeros((n, n))
    a[0, 1:] = 1.0
    a[1:, 0] = 1.0
    return a


def monte_carlo_bias(a: np.ndarray, d: int, scale: float, bias: float,
                     node: int, samples: int = 1000, seed: int = 0):
    """Empirical hub-residual statistics with and without the targeted fix.

    Quantization errors are modeled as uniform(-scale/2, scale/2) plus a
    constant bias on every entry.  The prompt assigns every node the negated
    expected aggregated error of the target node, i.e. P_j = -E[(A eps)_node]
    broadcast per node.  Returns a dict with the mean and standard error of
    the target-node residual norm in both placements.
    """
    rng = stream(seed, "theory.mc")
    n = a.shape[0]
    b_i = float(a[node].sum()) * bias   # E[(A eps)_node] per feature column
    p = np.zeros((n, d))
    p[node] = -b_i
    post_means = np.empty((samples, d))
    pre_means = np.empty((samples, d))
    for s in range(samples):
        eps = rng.uniform(-scale / 2.0, scale / 2.0, size=(n, d)) + bias
        inst = OracleInstance(a=a, x=np.zeros((n, d)), eps_x=eps, p=p)
        post, pre = targeted_residual(inst, node)
        post_means[s] = post
        pre_means[s] = pre
    def stats(m):
        mean = float(m.mean())
        se = float(m.std(ddof=1) / np.sqrt(m.size))
        return {"mean": mean, "stderr": se}
    return {"post": stats(post_means), "pre": stats(pre_means)}


# ------------------------------------------------------- low-rank bound


def _svd(m: np.ndarray):
    try:
        return np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as e:  # pragma: no cover
        raise NumericalError(f"SVD failed: {e}")


def power_iteration_singulars(m: np.ndarray, count: int, iters: int = 500,
                              seed: int = 0) -> np.ndarray:
    """Leading singular values by greedy power iteration with deflation; an
    independent cross-check of the direct SVD route."""
    rng = stream(seed, "theory.power")
    work = m.astype(np.float64).copy()
    out = np.empty(count)
    for idx in range(count):
        v = rng.normal(size=work.shape[1])
        v /= np.linalg.norm(v)
        for _ in range(iters):
            u = work @ v
            nu = np.linalg.norm(u)
            if nu == 0.0:
                break
            u /= nu
            v = work.T @ u
            nv = np.linalg.norm(v)
            if nv == 0.0:
                break
            v /= nv
        sigma = float(np.linalg.norm(work @ v))
        out[idx] = sigma
        if sigma > 0.0:
            u = work @ v / sigma
            work -= sigma * np.outer(u, v)
    return out


def error_matrix(inst: OracleInstance) -> np.ndarray:
    """End-to-end output error: quantized pipeline minus full-precision
    pipeline, W applied on the right of the aggregated features."""
    if inst.w_fp is None or inst.w_q is None:
        raise InputError("instance has no weight matrices")
    xq = inst.x + inst.eps_x
    return inst.a @ xq @ inst.w_q - inst.a @ inst.x @ inst.w_fp


def svd_bound(inst: OracleInstance, rank_budget: int | None = None):
    """Best achievable rank-limited correction error and its tail-energy
    bound.

    Returns a dict with 'achieved', 'bound', the optimal correction matrix
    'correction', and the 'prompt' realizing it in feature space (verified
    by re-evaluation).  The prompt exists whenever the quantized weights
    have full column rank, so that right-multiplying by the pseudoinverse
    inverts them exactly.
    """
    k = inst.rank_budget if rank_budget is None else rank_budget
    e = error_matrix(inst)
    r = min(e.shape)
    if not 0 <= k <= r:
        raise InputError(f"rank budget {k} out of range for {e.shape}")
    u, s, vt = _svd(e)
    tail = s[k:]
    bound = float(np.sqrt((tail ** 2).sum()))
    q_star = (u[:, :k] * s[:k]) @ vt[:k] if k else np.zeros_like(e)
    achieved = float(np.linalg.norm(e - q_star, "fro"))
    out = {"achieved": achieved, "bound": bound, "correction": q_star}
    wq = inst.w_q
    if wq.shape[0] >= wq.shape[1] and np.linalg.matrix_rank(wq) == wq.shape[1]:
        prompt = -q_star @ np.linalg.pinv(wq)
        residual = float(np.linalg.norm(e + prompt @ wq, "fro"))
        out["prompt"] = prompt
        out["prompt_residual"] = residual
    return out


# ------------------------------------------- low-rank weight decomposition


def svdquant_decompose(w: np.ndarray, r: int):
    """Split W into a rank-r factor pair plus a small residual: W = L1 L2 + R
    with L1 L2 the best rank-r approximation."""
    w = np.asarray(w, dtype=np.float64)
    if not 0 <= r <= min(w.shape):
        raise InputError(f"rank {r} out of range for {w.shape}")
    u, s, vt = _svd(w)
    l1 = u[:, :r] * s[:r]
    l2 = vt[:r]
    return l1, l2, w - l1 @ l2


def decompose_error_identity(x_hat: np.ndarray, w: np.ndarray, r: int,
                             p_x: QuantParams, p_r: QuantParams):
    """Both sides of the decomposition error identity: quantizing only the
    residual makes the end-to-end error equal the residual-term error."""
    l1, l2, res = svdquant_decompose(w, r)
    xq = fake_quantize(x_hat, p_x)
    rq = fake_quantize(res, p_r)
    full = np.linalg.norm(x_hat @ w - (x_hat @ l1 @ l2 + xq @ rq), "fro")
    residual_only = np.linalg.norm(x_hat @ res - xq @ rq, "fro")
    return float(full), float(residual_only)


# ------------------------------------------------------- finite differences


def finite_diff(f, x0: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a matrix."""
    if h <= 0:
        raise InputError("h must be positive")
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.empty_like(x0)
    it = np.nditer(x0, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x0.copy()
        xm = x0.copy()
        xp[idx] += h
        xm[idx] -= h
        fp, fm = f(xp), f(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError("non-finite function value in finite_diff")
        grad[idx] = (fp - fm) / (2.0 * h)
    return grad
