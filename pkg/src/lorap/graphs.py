"""Graph representation (CSR), normalization, dataset ingestion, synthetic
generators, and the binary cache format.

Graphs are immutable after construction: every operation that changes
structure or weights returns a new Graph.  Within each CSR row the column
indices are strictly increasing, which also guarantees there are no
duplicate edges.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import InputError, ParseError
from .rng import stream

log = logging.getLogger(__name__)

_CACHE_MAGIC = b"LRG1"

SPLIT_NONE, SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST = 0, 1, 2, 3
_SPLIT_NAMES = {"none": SPLIT_NONE, "train": SPLIT_TRAIN, "val": SPLIT_VAL, "test": SPLIT_TEST}


@dataclass
class Graph:
    num_nodes: int
    row_ptr: np.ndarray       # int64, length num_nodes + 1
    col_idx: np.ndarray       # int32, length num_edges
    edge_weight: np.ndarray | None = None   # float64 aligned with col_idx
    degree: np.ndarray = field(default=None)  # int64 per-node neighbor count

    def __post_init__(self):
        self.row_ptr = np.asarray(self.row_ptr, dtype=np.int64)
        self.col_idx = np.asarray(self.col_idx, dtype=np.int32)
        if self.edge_weight is not None:
            self.edge_weight = np.asarray(self.edge_weight, dtype=np.float64)
        if self.degree is None:
            self.degree = np.diff(self.row_ptr)
        validate_graph(self)

    @property
    def num_edges(self) -> int:
        return int(self.row_ptr[-1])

    def to_csr_matrix(self) -> sp.csr_matrix:
        """View as a scipy CSR matrix (weight 1 where no weights are set)."""
        w = self.edge_weight if self.edge_weight is not None \
            else np.ones(self.num_edges, dtype=np.float64)
        return sp.csr_matrix((w, self.col_idx, self.row_ptr),
                             shape=(self.num_nodes, self.num_nodes))


def validate_graph(g: Graph) -> None:
    n = g.num_nodes
    if n <= 0:
        raise InputError("num_nodes must be positive")
    if g.row_ptr.shape != (n + 1,) or g.row_ptr[0] != 0:
        raise InputError("row_ptr must have length num_nodes+1 and start at 0")
    if np.any(np.diff(g.row_ptr) < 0):
        raise InputError("row_ptr must be non-decreasing")
    e = int(g.row_ptr[-1])
    if g.col_idx.shape != (e,):
        raise InputError("col_idx length does not match row_ptr")
    if e and (g.col_idx.min() < 0 or g.col_idx.max() >= n):
        raise InputError("col_idx entry out of range")
    if e > 1:
        inc = np.diff(g.col_idx.astype(np.int64)) > 0
        starts = np.zeros(e, dtype=bool)
        bounds = g.row_ptr[1:-1]
        starts[bounds[bounds < e]] = True
        if not np.all(inc | starts[1:]):
            raise InputError("col_idx not strictly increasing within a row")
    if not np.array_equal(g.degree, np.diff(g.row_ptr)):
        raise InputError("degree array inconsistent with row_ptr")
    if g.edge_weight is not None:
        if g.edge_weight.shape != (e,):
            raise InputError("edge_weight length does not match col_idx")
        if not np.all(np.isfinite(g.edge_weight)):
            raise InputError("edge_weight must be finite")


@dataclass
class LabelVector:
    labels: np.ndarray        # int32 class indices
    num_classes: int
    split_mask: np.ndarray    # uint8 in {0 none, 1 train, 2 val, 3 test}

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        self.split_mask = np.asarray(self.split_mask, dtype=np.uint8)
        if self.labels.size and self.labels.max() >= self.num_classes:
            raise InputError("label index out of range")
        if self.split_mask.shape != self.labels.shape:
            raise InputError("split_mask length mismatch")

    def mask(self, split: str) -> np.ndarray:
        if split not in _SPLIT_NAMES:
            raise InputError(f"unknown split {split!r}")
        return self.split_mask == _SPLIT_NAMES[split]


@dataclass
class Dataset:
    graph: Graph
    features: np.ndarray      # float64 (num_nodes, d)
    labels: LabelVector


def _edges_to_csr(src: np.ndarray, dst: np.ndarray, num_nodes: int) -> Graph:
    """Dedup, sort, and pack directed edge arrays into CSR."""
    key = src.astype(np.int64) * num_nodes + dst.astype(np.int64)
    key = np.unique(key)
    src = (key // num_nodes).astype(np.int64)
    dst = (key % num_nodes).astype(np.int32)
    row_ptr = np.zeros(num_nodes + 1, dtype=np.int64)
    np.add.at(row_ptr, src + 1, 1)
    row_ptr = np.cumsum(row_ptr)
    return Graph(num_nodes, row_ptr, dst)


def build_csr(edge_list, num_nodes: int, make_undirected: bool = False) -> Graph:
    """Build a CSR graph from (src, dst) pairs.

    Duplicate edges collapse to one; self-loops are kept as given; with
    ``make_undirected`` every edge appears in both directions exactly once.
    """
    if num_nodes <= 0:
        raise InputError("num_nodes must be positive")
    edges = np.asarray(list(edge_list), dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= num_nodes):
        raise InputError("edge endpoint out of range")
    src, dst = edges[:, 0], edges[:, 1]
    if make_undirected:
        src, dst = np.concatenate([src, dst]), np.concatenate([dst, src])
    return _edges_to_csr(src, dst, num_nodes)


def normalize_adjacency(g: Graph, mode: str = "sym", add_self_loops: bool = True) -> Graph:
    """Attach normalization weights: sym -> 1/sqrt(deg_i*deg_j), row -> 1/deg_i,
    none -> 1.  Degrees count self-loops when they are added.  Isolated nodes
    under sym/row simply have empty rows (no error)."""
    if mode not in ("sym", "row", "none"):
        raise InputError(f"unknown normalization mode {mode!r}")
    src = np.repeat(np.arange(g.num_nodes, dtype=np.int64), g.degree)
    dst = g.col_idx.astype(np.int64)
    if add_self_loops:
        loops = np.arange(g.num_nodes, dtype=np.int64)
        src, dst = np.concatenate([src, loops]), np.concatenate([dst, loops])
    base = _edges_to_csr(src, dst.astype(np.int64), g.num_nodes)
    if mode == "none":
        w = np.ones(base.num_edges, dtype=np.float64)
    else:
        deg = base.degree.astype(np.float64)
        rows = np.repeat(np.arange(base.num_nodes), base.degree)
        cols = base.col_idx.astype(np.int64)
        with np.errstate(divide="ignore"):
            inv = np.where(deg > 0, 1.0 / deg, 0.0)
            inv_sqrt = np.sqrt(inv)
        if mode == "row":
            w = inv[rows]
        else:
            w = inv_sqrt[rows] * inv_sqrt[cols]
    return Graph(base.num_nodes, base.row_ptr, base.col_idx, edge_weight=w)


def _read_lines(source):
    if hasattr(source, "read"):
        text = source.read()
    else:
        text = source
    return text.splitlines()


def load_content_cites(content_text, cites_text, split_text=None) -> Dataset:
    """Load the plain-text citation format: ``<id> <f_1..f_d> <label>`` content
    lines and ``<cited-id> <citing-id>`` cite lines.

    Node order follows the content file; labels map to indices in first-
    occurrence order; citation edges are made undirected; edges naming
    unknown ids are dropped (counted and logged).  ``split_text`` optionally
    assigns splits via ``<id> <train|val|test>`` lines; otherwise a
    semi-supervised default split is applied (20 per class train, next 500
    val, last 1000 test, by file order).
    """
    ids, rows, raw_labels = [], [], []
    width = None
    for ln, line in enumerate(_read_lines(content_text), start=1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) < 3:
            raise ParseError("content line needs id, features, label", line=ln)
        feats = tok[1:-1]
        if width is None:
            width = len(feats)
        elif len(feats) != width:
            raise InputError(f"line {ln}: feature width {len(feats)} != {width}")
        try:
            rows.append(np.array(feats, dtype=np.float64))
        except ValueError as exc:
            raise ParseError(f"bad feature value ({exc})", line=ln) from None
        ids.append(tok[0])
        raw_labels.append(tok[-1])
    if not ids:
        raise InputError("empty content input")
    index = {node_id: i for i, node_id in enumerate(ids)}
    if len(index) != len(ids):
        raise InputError("duplicate node ids in content input")

    label_map: dict[str, int] = {}
    labels = np.empty(len(ids), dtype=np.int32)
    for i, lab in enumerate(raw_labels):
        labels[i] = label_map.setdefault(lab, len(label_map))

    edges, dropped = [], 0
    for ln, line in enumerate(_read_lines(cites_text), start=1):
        if not line.strip():
            continue
        tok = line.split()
        if len(tok) != 2:
            raise ParseError("cites line needs exactly two ids", line=ln)
        cited, citing = tok
        if cited in index and citing in index:
            edges.append((index[citing], index[cited]))
        else:
            dropped += 1
    if dropped:
        log.warning("dropped %d citation edges referencing unknown ids", dropped)

    g = build_csr(edges, len(ids), make_undirected=True)
    features = np.vstack(rows)

    split = np.zeros(len(ids), dtype=np.uint8)
    if split_text is not None:
        for ln, line in enumerate(_read_lines(split_text), start=1):
            if not line.strip():
                continue
            tok = line.split()
            if len(tok) != 2 or tok[1] not in _SPLIT_NAMES:
                raise ParseError("split line needs '<id> <train|val|test|none>'", line=ln)
            if tok[0] not in index:
                raise ParseError(f"unknown node id {tok[0]!r}", line=ln)
            split[index[tok[0]]] = _SPLIT_NAMES[tok[1]]
    else:
        split = default_semi_split(labels, len(label_map))

    lv = LabelVector(labels, len(label_map), split)
    return Dataset(g, features, lv)


def default_semi_split(labels: np.ndarray, num_classes: int,
                       per_class: int = 20, num_val: int = 500,
                       num_test: int = 1000) -> np.ndarray:
    """Semi-supervised split by file order: the first ``per_class`` nodes of
    each class train, the next ``num_val`` unassigned nodes validate, the last
    ``num_test`` nodes test.  Sizes shrink on small inputs."""
    n = labels.size
    split = np.zeros(n, dtype=np.uint8)
    taken = np.zeros(num_classes, dtype=np.int64)
    for i in range(n):
        c = labels[i]
        if taken[c] < per_class:
            split[i] = SPLIT_TRAIN
            taken[c] += 1
    free = np.flatnonzero(split == SPLIT_NONE)
    num_test = min(num_test, max(0, free.size - num_val))
    if num_test == 0 and free.size >= 2:
        # tiny corpus: split the leftovers instead of starving the test set
        num_val = free.size // 2
        num_test = free.size - num_val
    if num_test:
        split[free[-num_test:]] = SPLIT_TEST
        free = free[:-num_test]
    split[free[:num_val]] = SPLIT_VAL
    return split


def synth_sbm(block_sizes, p_in: float, p_out: float, d: int,
              class_signal: float, seed: int) -> Dataset:
    """Stochastic block model fixture with Gaussian features around per-class
    means of the given magnitude.  Undirected; 60/20/20 split by seeded
    shuffle; deterministic for a fixed seed."""
    block_sizes = [int(b) for b in block_sizes]
    if any(b <= 0 for b in block_sizes):
        raise InputError("empty block in block_sizes")
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise InputError("need 0 <= p_out <= p_in <= 1")
    n = sum(block_sizes)
    block = np.repeat(np.arange(len(block_sizes)), block_sizes)

    rng_e = stream(seed, "sbm.edges")
    prob = np.where(block[:, None] == block[None, :], p_in, p_out)
    draw = rng_e.random((n, n))
    upper = np.triu(draw < prob, k=1)
    src, dst = np.nonzero(upper)
    g = build_csr(np.stack([src, dst], axis=1), n, make_undirected=True)

    rng_f = stream(seed, "sbm.features")
    means = rng_f.standard_normal((len(block_sizes), d))
    norms = np.linalg.norm(means, axis=1, keepdims=True)
    means = class_signal * means / np.where(norms > 0, norms, 1.0)
    features = means[block] + rng_f.standard_normal((n, d))

    rng_s = stream(seed, "sbm.split")
    order = rng_s.permutation(n)
    split = np.zeros(n, dtype=np.uint8)
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    split[order[:n_train]] = SPLIT_TRAIN
    split[order[n_train:n_train + n_val]] = SPLIT_VAL
    split[order[n_train + n_val:]] = SPLIT_TEST

    lv = LabelVector(block.astype(np.int32), len(block_sizes), split)
    return Dataset(g, features, lv)


def synth_uniform(num_nodes: int, avg_degree: int, seed: int) -> Graph:
    """Random directed graph with ``avg_degree`` distinct neighbors per node
    (benchmark-scale fixture; no features)."""
    if num_nodes <= 1 or avg_degree < 1:
        raise InputError("need num_nodes > 1 and avg_degree >= 1")
    rng = stream(seed, "uniform.edges")
    dst = rng.integers(0, num_nodes, size=(num_nodes, avg_degree))
    src = np.repeat(np.arange(num_nodes, dtype=np.int64), avg_degree)
    return _edges_to_csr(src, dst.ravel().astype(np.int64), num_nodes)


def save_cache(ds: Dataset, fh) -> None:
    """Binary cache: magic 'LRG1', u64 num_nodes/num_edges/d/num_classes,
    row_ptr u64, col_idx u32, features f32 row-major, labels u16, split u8."""
    g, x, lv = ds.graph, ds.features, ds.labels
    fh.write(_CACHE_MAGIC)
    fh.write(struct.pack("<QQQQ", g.num_nodes, g.num_edges, x.shape[1], lv.num_classes))
    fh.write(g.row_ptr.astype("<u8").tobytes())
    fh.write(g.col_idx.astype("<u4").tobytes())
    fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())
    fh.write(lv.labels.astype("<u2").tobytes())
    fh.write(lv.split_mask.astype("u1").tobytes())


def load_cache(fh) -> Dataset:
    if fh.read(4) != _CACHE_MAGIC:
        raise InputError("bad magic; not an LRG1 cache")
    n, e, d, c = struct.unpack("<QQQQ", fh.read(32))
    row_ptr = np.frombuffer(fh.read(8 * (n + 1)), dtype="<u8").astype(np.int64)
    col_idx = np.frombuffer(fh.read(4 * e), dtype="<u4").astype(np.int32)
    features = np.frombuffer(fh.read(4 * n * d), dtype="<f4").astype(np.float64).reshape(n, d)
    labels = np.frombuffer(fh.read(2 * n), dtype="<u2").astype(np.int32)
    split = np.frombuffer(fh.read(n), dtype="u1").copy()
    g = Graph(int(n), row_ptr, col_idx)
    return Dataset(g, features, LabelVector(labels, int(c), split))
