"""AdjFuse: contextual enrichment of cell embeddings along a trajectory.

For each trajectory point, a learnable 3x3 kernel is softmax-normalized
over the point's active (in-grid) neighborhood cells, their embeddings are
convexly combined, passed through ReLU with a bias, projected, and added
back to the point's own embedding:

    w' = softmax(kernel over active slots)
    h~ = relu(sum_j w'_j h_j + b)
    h' = h + proj(h~)

Kernel slots are laid out row-major over (row-1..row+1) x (col-1..col+1),
so slot 4 is the point's own cell and is always active. Missing neighbors
at grid borders are masked out of the softmax, keeping the weights a
proper convex combination. All row-wise math uses fixed-order loops, so
results are bitwise identical whether positions are processed in one batch
or one at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .cells import CellGraph
from .errors import DataError, NumericError
from .trajectory import CellTrajectory

_SLOT_OFFSETS = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1)]
CENTER_SLOT = 4
_INACTIVE_BIAS = -1e9  # exp underflows to exactly 0 after max-subtraction


@dataclass
class AdjFuseParams:
    """Learnable pieces, shared by the context and target branches."""

    kernel: Tensor  # (3, 3)
    bias: Tensor  # (d,)
    proj: Tensor  # (d, d)


def init_adjfuse(store: ParamStore, d: int, rng: np.random.Generator) -> AdjFuseParams:
    """Kernel starts uniform (zeros), projection small so the residual path
    dominates early training."""
    limit = np.sqrt(6.0 / (2 * d)) * 0.1
    return AdjFuseParams(
        kernel=store.add("adjfuse.kernel", np.zeros((3, 3), dtype=np.float32)),
        bias=store.add("adjfuse.bias", np.zeros(d, dtype=np.float32)),
        proj=store.add("adjfuse.proj", rng.uniform(-limit, limit, size=(d, d)).astype(np.float32)),
    )


def neighborhood_slots(cells: np.ndarray, graph: CellGraph) -> np.ndarray:
    """(k, 9) cell id per kernel slot, -1 where the slot falls off the grid."""
    cells = np.asarray(cells, dtype=np.int64)
    n_rows = graph.n_nodes // graph.n_cols
    rows, cols = np.divmod(cells, graph.n_cols)
    out = np.full((cells.shape[0], 9), -1, dtype=np.int64)
    for slot, (dr, dc) in enumerate(_SLOT_OFFSETS):
        r2 = rows + dr
        c2 = cols + dc
        ok = (r2 >= 0) & (r2 < n_rows) & (c2 >= 0) & (c2 < graph.n_cols)
        out[ok, slot] = r2[ok] * graph.n_cols + c2[ok]
    return out


def normalize_kernel(kernel: Tensor, active_mask: np.ndarray) -> Tensor:
    """Softmax of the kernel over active slots; inactive slots get weight 0.

    ``active_mask`` is (3, 3) or (k, 9) boolean; the result has matching
    shape. Rows with no active slot are rejected.
    """
    mask = np.asarray(active_mask, dtype=bool)
    squeeze = mask.shape == (3, 3)
    flat_mask = mask.reshape(1, 9) if squeeze else mask
    if not flat_mask.any(axis=1).all():
        raise DataError("normalize_kernel: a position has no active kernel slot")
    logits = ad.add(ad.reshape(kernel, (1, 9)) if kernel.data.shape == (3, 3) else kernel,
                    Tensor(np.where(flat_mask, 0.0, _INACTIVE_BIAS).astype(np.float32)))
    w = ad.softmax(logits, axis=-1)
    return ad.reshape(w, (3, 3)) if squeeze else w


def aggregate(neighborhood: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Weighted neighborhood mix h~ = relu(sum_j w_j h_j + b) per position.

    ``neighborhood`` is (k, 9, d), ``weights`` (k, 9); inactive slots must
    carry weight exactly 0 so their (arbitrary) embeddings cancel.
    """
    if neighborhood.data.shape[-1] != bias.data.shape[-1]:
        raise NumericError(
            f"aggregate dim mismatch: embeddings {neighborhood.data.shape} vs bias {bias.data.shape}"
        )
    k, s, _ = neighborhood.data.shape
    mixed = ad.reduce_sum(ad.mul(ad.reshape(weights, (k, s, 1)), neighborhood), axis=1)
    return ad.relu(ad.add(mixed, bias))


def fuse(h: Tensor, h_tilde: Tensor, proj: Tensor) -> Tensor:
    """Residual enrichment h' = h + proj(h~)."""
    if h.data.shape != h_tilde.data.shape:
        raise NumericError(f"fuse shape mismatch: {h.data.shape} vs {h_tilde.data.shape}")
    return ad.add(h, ad.linear_rows(h_tilde, proj))


def apply_to_trajectory(
    cells: CellTrajectory | np.ndarray,
    table: Tensor,
    graph: CellGraph,
    params: AdjFuseParams,
    selected: np.ndarray | None = None,
) -> Tensor:
    """Enrich every position (or only ``selected`` ones, in order).

    ``table`` is the (n_cells, d) embedding table as a Tensor; pass a
    constant for the frozen-table training regime. Output is (k, d) where
    k = len(selected) or the full length.
    """
    seq = cells.cells if isinstance(cells, CellTrajectory) else np.asarray(cells, dtype=np.int64)
    if selected is not None:
        selected = np.asarray(selected, dtype=np.int64)
        if selected.size and (selected.min() < 0 or selected.max() >= seq.shape[0]):
            raise DataError(f"selected positions outside [0, {seq.shape[0]})")
        seq = seq[selected]
    bad = (seq < 0) | (seq >= graph.n_nodes)
    if bad.any():
        raise DataError(f"invalid cell id at position {int(np.flatnonzero(bad)[0])}")
    slots = neighborhood_slots(seq, graph)
    active = slots >= 0
    neigh = ad.gather_rows(table, np.where(active, slots, 0))  # (k, 9, d)
    weights = normalize_kernel(ad.reshape(params.kernel, (1, 9)), active)
    h_tilde = aggregate(neigh, weights, params.bias)
    h = ad.gather_rows(table, seq)
    return fuse(h, h_tilde, params.proj)
