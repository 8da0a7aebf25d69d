"""Cell embedding pretraining: grid graph, biased random walks, skip-gram.

Grid cells form a graph under 8-neighborhood adjacency. Random walks over
that graph (second-order biased, return parameter ``p`` and in-out
parameter ``q``) provide the corpus for skip-gram training with negative
sampling; the resulting vectors initialize the trajectory encoders.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointError, DataError
from .trajectory import GridSpec


@dataclass(frozen=True)
class CellGraph:
    """8-neighborhood adjacency, padded to fixed width with -1."""

    n_nodes: int
    n_cols: int
    neighbors: np.ndarray  # (n_nodes, 8) int64, -1 past counts[i]
    counts: np.ndarray  # (n_nodes,) int64


def build_cell_graph(grid: GridSpec) -> CellGraph:
    """Adjacency of the grid: corners get 3 neighbors, edges 5, interior 8."""
    rows = np.arange(grid.n_rows)
    cols = np.arange(grid.n_cols)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    rr = rr.ravel()
    cc = cc.ravel()
    n = grid.n_cells
    neighbors = np.full((n, 8), -1, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            r2 = rr + dr
            c2 = cc + dc
            ok = (r2 >= 0) & (r2 < grid.n_rows) & (c2 >= 0) & (c2 < grid.n_cols)
            idx = np.flatnonzero(ok)
            neighbors[idx, counts[idx]] = r2[idx] * grid.n_cols + c2[idx]
            counts[idx] += 1
    return CellGraph(n_nodes=n, n_cols=grid.n_cols, neighbors=neighbors, counts=counts)


def walk_bias_weights(graph: CellGraph, prev: np.ndarray, cur: np.ndarray, p: float, q: float) -> np.ndarray:
    """Unnormalized next-step weights for each walk, shape (len(cur), 8).

    Candidate x from node v reached via t: weight 1/p if x == t, 1 if x is
    also adjacent to t, else 1/q. Padding slots get weight 0.
    """
    cand = graph.neighbors[cur]  # (w, 8)
    valid = cand >= 0
    w = np.full(cand.shape, 1.0 / q)
    # adjacency to prev is a coordinate check: the graph is the 8-neighborhood
    # lattice, so two nodes are adjacent iff their rows and cols differ by <= 1
    pr, pc = np.divmod(prev[:, None], np.int64(graph.n_cols))
    xr, xc = np.divmod(np.where(valid, cand, 0), np.int64(graph.n_cols))
    near = (np.abs(pr - xr) <= 1) & (np.abs(pc - xc) <= 1)
    w[near] = 1.0
    w[cand == prev[:, None]] = 1.0 / p
    w[~valid] = 0.0
    return w


def random_walks(
    graph: CellGraph,
    walk_len: int = 50,
    walks_per_node: int = 10,
    p: float = 1.0,
    q: float = 1.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Second-order biased walks, one batch per start node, vectorized per step.

    Returns an (n_nodes * walks_per_node, walk_len) int64 array of node ids.
    The first step is uniform over neighbors; later steps use
    :func:`walk_bias_weights`. Every grid node has at least 3 neighbors, so
    walks never get stuck.
    """
    if walk_len < 2:
        raise DataError(f"walk_len must be >= 2, got {walk_len}")
    if p <= 0 or q <= 0:
        raise DataError(f"p and q must be positive, got p={p} q={q}")
    rng = np.random.default_rng() if rng is None else rng
    starts = np.repeat(np.arange(graph.n_nodes, dtype=np.int64), walks_per_node)
    n_walks = starts.shape[0]
    walks = np.empty((n_walks, walk_len), dtype=np.int64)
    walks[:, 0] = starts

    # first hop: uniform over true neighbors
    pick = (rng.random(n_walks) * graph.counts[starts]).astype(np.int64)
    walks[:, 1] = graph.neighbors[starts, pick]

    for step in range(2, walk_len):
        prev = walks[:, step - 2]
        cur = walks[:, step - 1]
        w = walk_bias_weights(graph, prev, cur, p, q)
        cum = np.cumsum(w, axis=1)
        u = rng.random(n_walks) * cum[:, -1]
        choice = (u[:, None] >= cum).sum(axis=1)
        walks[:, step] = graph.neighbors[cur, choice]
    return walks


def _scatter_add(dest: np.ndarray, idx: np.ndarray, grad: np.ndarray) -> None:
    """dest[idx] += grad with duplicate indices summed, faster than np.add.at.

    bincount over flattened (row, dim) indices sums duplicates in input
    order at C speed, so results are reproducible.
    """
    n, d = dest.shape
    flat = (idx[:, None] * d + np.arange(d)).ravel()
    sums = np.bincount(flat, weights=grad.ravel(), minlength=n * d)
    dest += sums.reshape(n, d).astype(dest.dtype)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def train_skipgram(
    walks: np.ndarray,
    n_nodes: int,
    dim: int,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    rng: np.random.Generator | None = None,
    batch_size: int = 8192,
) -> np.ndarray:
    """Skip-gram with negative sampling over walk corpora.

    Input vectors start at U[-0.5/dim, 0.5/dim], output vectors at zero.
    Negatives are drawn from the corpus unigram distribution raised to 3/4.
    The learning rate decays linearly to 1e-4 of its start value. Returns
    the input vectors, float32, shape (n_nodes, dim).
    """
    rng = np.random.default_rng() if rng is None else rng
    if walks.size == 0:
        raise DataError("empty walk corpus")
    w_in = rng.uniform(-0.5 / dim, 0.5 / dim, size=(n_nodes, dim)).astype(np.float32)
    w_out = np.zeros((n_nodes, dim), dtype=np.float32)

    counts = np.bincount(walks.ravel(), minlength=n_nodes).astype(np.float64)
    noise = counts ** 0.75
    noise /= noise.sum()

    centers, contexts = _window_pairs(walks, window)
    n_pairs = centers.shape[0]
    total = n_pairs * epochs
    done = 0
    min_lr = lr * 1e-4
    for _ in range(epochs):
        order = rng.permutation(n_pairs)
        for lo in range(0, n_pairs, batch_size):
            sel = order[lo : lo + batch_size]
            c = centers[sel]
            o = contexts[sel]
            b = c.shape[0]
            neg = rng.choice(n_nodes, size=(b, negatives), p=noise)
            step_lr = max(min_lr, lr * (1.0 - done / total))

            vc = w_in[c]  # (b, d)
            tgt = np.concatenate([o[:, None], neg], axis=1)  # (b, 1+neg)
            vt = w_out[tgt]  # (b, 1+neg, d)
            score = _sigmoid(np.einsum("bd,bkd->bk", vc, vt))
            g = -score
            g[:, 0] += 1.0  # positive label
            g = (g * step_lr).astype(np.float32)

            grad_c = np.einsum("bk,bkd->bd", g, vt)
            grad_t = g[:, :, None] * vc[:, None, :]
            _scatter_add(w_in, c, grad_c)
            _scatter_add(w_out, tgt.ravel(), grad_t.reshape(-1, dim))
            done += b
    return w_in


def _window_pairs(walks: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """All (center, context) pairs with positions at distance 1..window."""
    if window < 1:
        raise DataError(f"window must be >= 1, got {window}")
    n_walks, walk_len = walks.shape
    cs = []
    os_ = []
    for off in range(1, min(window, walk_len - 1) + 1):
        a = walks[:, :-off].ravel()
        b = walks[:, off:].ravel()
        cs.append(a)
        os_.append(b)
        cs.append(b)
        os_.append(a)
    return np.concatenate(cs), np.concatenate(os_)


@dataclass(frozen=True)
class EmbeddingTable:
    """Pretrained per-cell vectors, bound to the grid they were trained on."""

    grid_hash: str
    vectors: np.ndarray  # (n_cells, dim) float32

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float32))
        if v.ndim != 2 or v.shape[0] < 1:
            raise DataError(f"embedding table must be (n_cells, dim), got {v.shape}")
        v.flags.writeable = False
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def lookup(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64)
        if cells.size and (cells.min() < 0 or cells.max() >= self.vectors.shape[0]):
            raise DataError(
                f"cell index outside [0, {self.vectors.shape[0]}) in embedding lookup"
            )
        return self.vectors[cells]


def pretrain_cell_embeddings(
    grid: GridSpec,
    dim: int,
    walk_len: int = 50,
    walks_per_node: int = 10,
    p: float = 1.0,
    q: float = 1.0,
    window: int = 5,
    negatives: int = 5,
    epochs: int = 5,
    lr: float = 0.025,
    seed: int = 0,
) -> EmbeddingTable:
    """Walks plus skip-gram over the grid graph; the standard pretraining path."""
    rng = np.random.default_rng(seed)
    graph = build_cell_graph(grid)
    walks = random_walks(graph, walk_len, walks_per_node, p, q, rng)
    vecs = train_skipgram(walks, graph.n_nodes, dim, window, negatives, epochs, lr, rng)
    return EmbeddingTable(grid_hash=grid.hash(), vectors=vecs)


_EMB_MAGIC = b"TJEM"
_EMB_VERSION = 1


def save_embeddings(table: EmbeddingTable, path: str) -> None:
    meta = json.dumps({"grid_hash": table.grid_hash}).encode()
    n, d = table.vectors.shape
    with open(path, "wb") as fh:
        fh.write(_EMB_MAGIC)
        fh.write(struct.pack("<IIII", _EMB_VERSION, len(meta), n, d))
        fh.write(meta)
        fh.write(table.vectors.tobytes())


def load_embeddings(path: str, expect_grid: GridSpec | None = None) -> EmbeddingTable:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != _EMB_MAGIC:
        raise CheckpointError(f"{path}: not an embedding table file")
    version, meta_len, n, d = struct.unpack("<IIII", blob[4:20])
    if version != _EMB_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    expected = 20 + meta_len + n * d * 4
    if len(blob) != expected:
        raise CheckpointError(f"{path}: truncated file ({len(blob)} bytes, expected {expected})")
    meta = json.loads(blob[20 : 20 + meta_len])
    vecs = np.frombuffer(blob[20 + meta_len :], dtype=np.float32).reshape(n, d)
    table = EmbeddingTable(grid_hash=meta["grid_hash"], vectors=vecs.copy())
    if expect_grid is not None and table.grid_hash != expect_grid.hash():
        raise CheckpointError(
            f"{path}: embedding table was trained on a different grid "
            f"({table.grid_hash[:12]}... != {expect_grid.hash()[:12]}...)"
        )
    return table
