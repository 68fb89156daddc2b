"""Joint training of weights, quantizer ranges, and prompts: plain QAT, a
degree-protected variant, and an FP32 reference path; plus evaluation,
grid sweeps, the run-report TSV format, and model checkpointing.

Training is full-batch gradient descent with adaptive moments over every
trainable tensor at once; quantizer ranges follow the forward pass by EMA
tracking rather than gradients.  The best-validation snapshot is returned.
"""

from __future__ import annotations

import copy
import io
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import prompts as P
from .errors import ConfigError, InputError, StateError, TrainingError
from .graphs import Dataset, Graph, LabelVector, normalize_adjacency
from .quant import RangeTracker
from .rng import stream

ARCHS = ("gcn", "gin")
FRAMEWORKS = ("fp32", "qat", "dq")
_CKPT_MAGIC = b"LMD1"

REPORT_HEADER = "framework\tarch\tprompt\tk\tr\tseed\ttest_acc\ttrain_s\tparams_prompt"


@dataclass
class TrainConfig:
    arch: str = "gcn"
    framework: str = "fp32"
    bits_w: int = 8
    bits_a: int = 8
    prompt_mode: str = "none"
    k: int = 5
    r: int = 1
    hidden: int = 16
    num_layers: int = 2
    lr: float = 0.01
    weight_decay: float = 5e-4
    epochs: int = 200
    patience: int = 50
    seed: int = 0
    dq_p_min: float = 0.0
    dq_p_max: float = 0.1
    clip_percentile: float | None = None
    aggregation_mode: str = "sum"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.framework not in FRAMEWORKS:
            raise ConfigError(f"unknown framework {self.framework!r}")
        if self.prompt_mode not in P.MODES:
            raise ConfigError(f"unknown prompt_mode {self.prompt_mode!r}")
        if self.aggregation_mode not in L.AGG_MODES:
            raise ConfigError(f"unknown aggregation_mode {self.aggregation_mode!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.k < 1 or self.r < 1:
            raise ConfigError("k and r must be positive")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if not (0.0 <= self.dq_p_min <= self.dq_p_max <= 1.0):
            raise ConfigError("need 0 <= dq_p_min <= dq_p_max <= 1")


@dataclass
class Metrics:
    train_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    test_acc: float = 0.0
    train_seconds: float = 0.0
    params_model: int = 0
    params_prompt: int = 0
    avg_bits: float = 32.0
    best_epoch: int = 0
    epochs_run: int = 0


@dataclass
class ModelState:
    cfg: TrainConfig
    layers: list
    bank: P.PromptBank | None
    node_prompt: P.NodePrompt | None
    qs: L.QuantState | None
    input_dim: int
    num_classes: int


# ------------------------------------------------------------------- loss


def cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray):
    """Mean negative log-softmax over masked nodes; gradient is zero outside
    the mask."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise InputError("cross_entropy: empty mask")
    z = logits[idx]
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    y = labels[idx]
    loss = float(-logp[np.arange(idx.size), y].mean())
    grad = np.zeros_like(logits)
    soft = np.exp(logp)
    soft[np.arange(idx.size), y] -= 1.0
    grad[idx] = soft / idx.size
    return loss, grad


# -------------------------------------------------------- degree protection


def dq_protect_mask(g: Graph, p_min: float, p_max: float, seed: int,
                    epoch: int = 0) -> np.ndarray:
    """Per-node protection flags: probability linear in degree rank (highest
    degree gets p_max), one Bernoulli draw per node per epoch."""
    if not (0.0 <= p_min <= p_max <= 1.0):
        raise InputError("need 0 <= p_min <= p_max <= 1")
    n = g.num_nodes
    order = np.argsort(g.degree, kind="stable")
    rank = np.empty(n, dtype=np.float64)
    rank[order] = np.arange(n)
    prob = p_min + (p_max - p_min) * rank / max(n - 1, 1)
    rng = stream(seed, f"dq.protect.{epoch}")
    return rng.random(n) < prob


# ------------------------------------------------------------- model setup


def init_model(cfg: TrainConfig, input_dim: int, num_classes: int) -> ModelState:
    widths = [input_dim] + [cfg.hidden] * (cfg.num_layers - 1) + [num_classes]
    lay = []
    for l in range(cfg.num_layers):
        if cfg.arch == "gcn":
            lay.append(L.init_gcn_layer(widths[l], widths[l + 1], cfg.seed, tag=str(l)))
        else:
            lay.append(L.init_gin_layer(widths[l], cfg.hidden, widths[l + 1],
                                        cfg.seed, tag=str(l)))
    bank = None
    if cfg.prompt_mode in P.POST_AGG_MODES:
        # prompts live at the hidden width; layers whose aggregation width
        # differs (the input layer) simply skip injection
        mode = "lorap"
        bank = P.init_prompt_bank(cfg.num_layers, cfg.k, cfg.r, cfg.hidden,
                                  mode=mode, seed=cfg.seed)
        bank.mode = cfg.prompt_mode if cfg.prompt_mode in P.POST_AGG_MODES else mode
    node_prompt = None
    if cfg.prompt_mode == "gpf":
        node_prompt = P.init_node_prompt("gpf", input_dim, seed=cfg.seed)
    elif cfg.prompt_mode == "gpf_plus":
        node_prompt = P.init_node_prompt("gpf_plus", input_dim, cfg.k, cfg.r,
                                         seed=cfg.seed)
    elif cfg.prompt_mode == "gpf_lorap":
        node_prompt = P.init_node_prompt("gpf", input_dim, seed=cfg.seed)
    qs = None
    if cfg.framework in ("qat", "dq"):
        cp = cfg.clip_percentile
        if cfg.framework == "dq" and cp is None:
            cp = 0.999
        qs = L.QuantState(cfg.bits_w, cfg.bits_a, cfg.num_layers, clip_percentile=cp)
    return ModelState(cfg, lay, bank, node_prompt, qs, input_dim, num_classes)


def _norm_graph(cfg: TrainConfig, g: Graph) -> Graph:
    if cfg.arch == "gcn":
        return normalize_adjacency(g, "sym", add_self_loops=True)
    return g


def model_forward(state: ModelState, g: Graph, x: np.ndarray,
                  update: bool = True, protect: np.ndarray | None = None,
                  with_tapes: bool = False):
    cfg = state.cfg
    np_tape = None
    x = np.asarray(x, dtype=np.float64)
    if state.node_prompt is not None:
        x, np_tape = P.gpf_apply(x, state.node_prompt, return_tape=True)
    x, in_mask = L.quantize_input(x, state.qs, update, protect)
    h = x
    tapes = []
    last_idx = len(state.layers) - 1
    for l, p in enumerate(state.layers):
        if cfg.arch == "gcn":
            h, tape = L.gcn_forward(g, h, p, l, state.qs, state.bank,
                                    cfg.aggregation_mode, l == last_idx,
                                    update, protect)
        else:
            h, tape = L.gin_forward(g, h, p, l, state.qs, state.bank,
                                    l == last_idx, update, protect)
        tapes.append(tape)
    if with_tapes:
        return h, tapes, np_tape, in_mask
    return h


def model_param_counts(state: ModelState):
    model = 0
    for p in state.layers:
        if p.weight is not None:
            model += p.weight.size + p.bias.size
        if p.gin_mlp is not None:
            model += sum(w.size + b.size for w, b in p.gin_mlp) + 1
    prompt = 0
    if state.bank is not None:
        prompt += P.param_count(state.bank)["total"]
    if state.node_prompt is not None:
        prompt += P.node_param_count(state.node_prompt)["total"]
    return model, prompt


# ---------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict, decay_names=(), weight_decay=0.0):
        self.t += 1
        b1, b2 = self.b1, self.b2
        for name, arr in params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if name in decay_names and weight_decay:
                g = g + weight_decay * arr
            if name not in self.m:
                self.m[name] = np.zeros_like(arr)
                self.v[name] = np.zeros_like(arr)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            arr -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _collect_params(state: ModelState):
    """Name -> live array view for every trainable tensor, plus the set of
    names subject to weight decay.  gin_eps is wrapped per layer."""
    params, decay = {}, set()
    for l, p in enumerate(state.layers):
        if p.weight is not None:
            params[f"l{l}.w"] = p.weight
            params[f"l{l}.b"] = p.bias
            decay.add(f"l{l}.w")
        if p.gin_mlp is not None:
            for j, (w, b) in enumerate(p.gin_mlp):
                params[f"l{l}.mlp{j}.w"] = w
                params[f"l{l}.mlp{j}.b"] = b
                decay.add(f"l{l}.mlp{j}.w")
    bank = state.bank
    if bank is not None:
        for l in range(bank.num_layers):
            params[f"bank.pa{l}"] = bank.p_a[l]
            params[f"bank.pb{l}"] = bank.p_b[l]
        params["bank.phiw"] = bank.phi_weight
        params["bank.phib"] = bank.phi_bias
    npmt = state.node_prompt
    if npmt is not None:
        if npmt.mode == "gpf":
            params["np.vec"] = npmt.shared_vector
        else:
            params["np.pa"] = npmt.p_a
            params["np.pb"] = npmt.p_b
            params["np.phiw"] = npmt.phi_weight
            params["np.phib"] = npmt.phi_bias
    return params, decay


def _collect_grads(state: ModelState, layer_grads, prompt_grads, np_grads):
    grads = {}
    for l, lg in enumerate(layer_grads):
        if lg.d_weight is not None:
            grads[f"l{l}.w"] = lg.d_weight
            grads[f"l{l}.b"] = lg.d_bias
        if lg.d_gin_mlp is not None:
            for j, (dw, db) in enumerate(lg.d_gin_mlp):
                grads[f"l{l}.mlp{j}.w"] = dw
                grads[f"l{l}.mlp{j}.b"] = db
    if prompt_grads is not None:
        for l in range(len(prompt_grads.d_p_a)):
            grads[f"bank.pa{l}"] = prompt_grads.d_p_a[l]
            grads[f"bank.pb{l}"] = prompt_grads.d_p_b[l]
        grads["bank.phiw"] = prompt_grads.d_phi_w
        grads["bank.phib"] = prompt_grads.d_phi_b
    if np_grads is not None:
        if np_grads.d_shared is not None:
            grads["np.vec"] = np_grads.d_shared
        else:
            grads["np.pa"] = np_grads.d_p_a
            grads["np.pb"] = np_grads.d_p_b
            grads["np.phiw"] = np_grads.d_phi_w
            grads["np.phib"] = np_grads.d_phi_b
    return grads


# ------------------------------------------------------------------ training


def train(cfg: TrainConfig, ds: Dataset):
    """Train on one dataset; returns (best ModelState, Metrics)."""
    for split in ("train", "val", "test"):
        if not ds.labels.mask(split).any():
            raise InputError(f"dataset has an empty {split} split")
    t0 = time.perf_counter()
    g = _norm_graph(cfg, ds.graph)
    state = init_model(cfg, ds.features.shape[1], ds.labels.num_classes)
    opt = Adam(cfg.lr)
    params, decay = _collect_params(state)
    train_mask = ds.labels.mask("train")
    val_mask = ds.labels.mask("val")

    metrics = Metrics()
    best_val, best_state, best_epoch = -1.0, None, 0
    since_best = 0
    for epoch in range(cfg.epochs):
        protect = None
        if cfg.framework == "dq":
            protect = dq_protect_mask(ds.graph, cfg.dq_p_min, cfg.dq_p_max,
                                      cfg.seed, epoch)
        logits, tapes, np_tape, in_mask = model_forward(
            state, g, ds.features, update=True, protect=protect, with_tapes=True)
        loss, grad = cross_entropy(logits, ds.labels.labels, train_mask)
        if not np.isfinite(loss):
            raise TrainingError("training loss diverged", epoch=epoch)
        layer_grads, prompt_grads, grad_x = L.model_backward(
            g, state.layers, tapes, grad, state.bank, cfg.aggregation_mode)
        np_grads = None
        if state.node_prompt is not None:
            if in_mask is not None:
                grad_x = grad_x * in_mask
            np_grads = P.gpf_backward(grad_x, np_tape, state.node_prompt)
        opt.step(params, _collect_grads(state, layer_grads, prompt_grads, np_grads),
                 decay, cfg.weight_decay)
        metrics.train_loss.append(loss)

        val_logits = model_forward(state, g, ds.features, update=False)
        val_acc = _accuracy(val_logits, ds.labels.labels, val_mask)
        metrics.val_acc.append(val_acc)
        if val_acc > best_val:
            best_val, best_epoch = val_acc, epoch
            best_state = copy.deepcopy(state)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                break

    metrics.epochs_run = len(metrics.train_loss)
    metrics.best_epoch = best_epoch
    metrics.test_acc = evaluate(best_state, ds, "test")
    metrics.params_model, metrics.params_prompt = model_param_counts(best_state)
    metrics.avg_bits = 32.0 if cfg.framework == "fp32" else float(cfg.bits_a)
    metrics.train_seconds = time.perf_counter() - t0
    return best_state, metrics


def _accuracy(logits, labels, mask) -> float:
    idx = np.flatnonzero(mask)
    pred = np.argmax(logits[idx], axis=1)   # ties resolve to the lowest class
    return float((pred == labels[idx]).mean())


def evaluate(state: ModelState, ds: Dataset, split: str) -> float:
    mask = ds.labels.mask(split)
    if not mask.any():
        raise InputError(f"empty {split} split")
    g = _norm_graph(state.cfg, ds.graph)
    logits = model_forward(state, g, ds.features, update=False)
    return _accuracy(logits, ds.labels.labels, mask)


# -------------------------------------------------------------------- sweep


@dataclass
class SweepCell:
    k: int
    r: int
    mean_acc: float
    std_acc: float
    runs: list          # (seed, Metrics) pairs
    error: str | None = None


def sweep(cfg: TrainConfig, ds: Dataset, k_grid, r_grid, seeds):
    """Cartesian grid over (k, r) x seeds.  Training errors are recorded per
    cell without aborting the rest of the sweep."""
    k_grid, r_grid, seeds = list(k_grid), list(r_grid), list(seeds)
    if not k_grid or not r_grid or not seeds:
        raise InputError("sweep grids must be non-empty")
    cells = []
    for k in k_grid:
        for r in r_grid:
            runs, err = [], None
            for seed in seeds:
                run_cfg = _cfg_with(cfg, k=k, r=r, seed=seed)
                try:
                    _, m = train(run_cfg, ds)
                    runs.append((seed, m))
                except TrainingError as exc:
                    err = str(exc)
            accs = np.array([m.test_acc for _, m in runs])
            cells.append(SweepCell(
                k, r,
                float(accs.mean()) if accs.size else float("nan"),
                float(accs.std(ddof=1)) if accs.size > 1 else 0.0,
                runs, err))
    return cells


def _cfg_with(cfg: TrainConfig, **kw) -> TrainConfig:
    d = dict(cfg.__dict__)
    d.update(kw)
    return TrainConfig(**d)


# ------------------------------------------------------------------ reports


def write_report(cells_or_runs, cfg: TrainConfig, fh) -> None:
    """Run-report TSV, one row per completed training run."""
    fh.write(REPORT_HEADER + "\n")
    for cell in cells_or_runs:
        for seed, m in cell.runs:
            fh.write(f"{cfg.framework}\t{cfg.arch}\t{cfg.prompt_mode}\t{cell.k}\t"
                     f"{cell.r}\t{seed}\t{m.test_acc:.4f}\t{m.train_seconds:.3f}\t"
                     f"{m.params_prompt}\n")


def read_report(fh):
    """Parse the run-report TSV back into a list of row dicts."""
    lines = fh.read().splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise InputError("not a run-report TSV (bad header)")
    rows = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        tok = line.split("\t")
        if len(tok) < 9:
            raise InputError(f"line {ln}: expected 9 report columns")
        rows.append({
            "framework": tok[0], "arch": tok[1], "prompt": tok[2],
            "k": int(tok[3]), "r": int(tok[4]), "seed": int(tok[5]),
            "test_acc": float(tok[6]), "train_s": float(tok[7]),
            "params_prompt": int(tok[8]),
        })
    return rows


# --------------------------------------------------------------- checkpoint


def _write_arr(fh, a, dtype="<f4"):
    a = np.ascontiguousarray(a, dtype=dtype)
    fh.write(struct.pack("<I", a.ndim))
    for dim in a.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(a.tobytes())


def _read_arr(fh, dtype="<f4"):
    ndim = struct.unpack("<I", fh.read(4))[0]
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    raw = np.frombuffer(fh.read(count * np.dtype(dtype).itemsize), dtype=dtype)
    return raw.astype(np.float64).reshape(shape)


def _write_tracker(fh, t: RangeTracker):
    lo = t.running_min if t.running_min is not None else float("nan")
    hi = t.running_max if t.running_max is not None else float("nan")
    cp = t.clip_percentile if t.clip_percentile is not None else float("nan")
    fh.write(struct.pack("<dddd", lo, hi, t.momentum, cp))


def _read_tracker(fh) -> RangeTracker:
    lo, hi, m, cp = struct.unpack("<dddd", fh.read(32))
    return RangeTracker(None if np.isnan(lo) else lo,
                        None if np.isnan(hi) else hi,
                        m, None if np.isnan(cp) else cp)


def save_model(state: ModelState, fh) -> None:
    """Checkpoint: magic 'LMD1', config scalars, FP32 parameter blobs,
    quantizer tracker states, prompt bank blob."""
    cfg = state.cfg
    fh.write(_CKPT_MAGIC)
    fh.write(struct.pack("<BBBB", ARCHS.index(cfg.arch),
                         FRAMEWORKS.index(cfg.framework),
                         P.MODES.index(cfg.prompt_mode),
                         L.AGG_MODES.index(cfg.aggregation_mode)))
    fh.write(struct.pack("<HHIIIIII", cfg.bits_w, cfg.bits_a, cfg.num_layers,
                         cfg.hidden, cfg.k, cfg.r, state.input_dim,
                         state.num_classes))
    fh.write(struct.pack("<dI", cfg.lr, cfg.seed))
    for p in state.layers:
        if cfg.arch == "gcn":
            _write_arr(fh, p.weight)
            _write_arr(fh, p.bias)
        else:
            fh.write(struct.pack("<d", p.gin_eps))
            for w, b in p.gin_mlp:
                _write_arr(fh, w)
                _write_arr(fh, b)
    qs = state.qs
    fh.write(struct.pack("<B", int(qs is not None)))
    if qs is not None:
        _write_tracker(fh, qs.input)
        for lst in (qs.agg, qs.out, qs.hidden):
            for t in lst:
                _write_tracker(fh, t)
    bank = state.bank
    fh.write(struct.pack("<B", int(bank is not None)))
    if bank is not None:
        for a in bank.p_a:
            _write_arr(fh, a)
        for b in bank.p_b:
            _write_arr(fh, b)
        _write_arr(fh, bank.phi_weight)
        _write_arr(fh, bank.phi_bias)
    npmt = state.node_prompt
    kind = 0 if npmt is None else (1 if npmt.mode == "gpf" else 2)
    fh.write(struct.pack("<B", kind))
    if kind == 1:
        _write_arr(fh, npmt.shared_vector)
    elif kind == 2:
        for a in (npmt.p_a, npmt.p_b, npmt.phi_weight, npmt.phi_bias):
            _write_arr(fh, a)


def load_model(fh) -> ModelState:
    if fh.read(4) != _CKPT_MAGIC:
        raise InputError("bad magic; not an LMD1 checkpoint")
    arch_i, fw_i, pm_i, am_i = struct.unpack("<BBBB", fh.read(4))
    bits_w, bits_a, n_layers, hidden, k, r, d_in, n_cls = struct.unpack(
        "<HHIIIIII", fh.read(28))
    lr, seed = struct.unpack("<dI", fh.read(12))
    cfg = TrainConfig(arch=ARCHS[arch_i], framework=FRAMEWORKS[fw_i],
                      bits_w=bits_w, bits_a=bits_a, prompt_mode=P.MODES[pm_i],
                      k=k, r=r, hidden=hidden, num_layers=n_layers, lr=lr,
                      seed=seed, aggregation_mode=L.AGG_MODES[am_i])
    lay = []
    for _ in range(n_layers):
        if cfg.arch == "gcn":
            w = _read_arr(fh)
            b = _read_arr(fh)
            lay.append(L.LayerParams(weight=w, bias=b))
        else:
            eps = struct.unpack("<d", fh.read(8))[0]
            mlp = []
            for _ in range(2):
                w = _read_arr(fh)
                b = _read_arr(fh)
                mlp.append((w, b))
            lay.append(L.LayerParams(gin_eps=eps, gin_mlp=mlp))
    qs = None
    if struct.unpack("<B", fh.read(1))[0]:
        qs = L.QuantState(bits_w, bits_a, n_layers, clip_percentile=None)
        qs.input = _read_tracker(fh)
        for lst in (qs.agg, qs.out, qs.hidden):
            for i in range(n_layers):
                lst[i] = _read_tracker(fh)
        qs.clip_percentile = qs.input.clip_percentile
    bank = None
    if struct.unpack("<B", fh.read(1))[0]:
        p_a = [_read_arr(fh) for _ in range(n_layers)]
        p_b = [_read_arr(fh) for _ in range(n_layers)]
        phi_w = _read_arr(fh)
        phi_b = _read_arr(fh)
        mode = cfg.prompt_mode if cfg.prompt_mode in P.POST_AGG_MODES else "lorap"
        bank = P.PromptBank(n_layers, k, r, hidden, p_a, p_b, phi_w, phi_b, mode)
    npmt = None
    kind = struct.unpack("<B", fh.read(1))[0]
    if kind == 1:
        npmt = P.NodePrompt("gpf", d_in, shared_vector=_read_arr(fh))
    elif kind == 2:
        pa, pb, pw, pbias = (_read_arr(fh) for _ in range(4))
        npmt = P.NodePrompt("gpf_plus", d_in, p_a=pa, p_b=pb,
                            phi_weight=pw, phi_bias=pbias)
    return ModelState(cfg, lay, bank, npmt, qs, d_in, n_cls)


def dumps_model(state: ModelState) -> bytes:
    buf = io.BytesIO()
    save_model(state, buf)
    return buf.getvalue()


def loads_model(data: bytes) -> ModelState:
    return load_model(io.BytesIO(data))
