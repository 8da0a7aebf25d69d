"""The trajectory JEPA model: encoders, predictor, sampling, loss, inference.

Two transformer encoders with identical shapes but independent weights: the
context encoder trains by gradient, the target encoder only by EMA of the
context weights. A transformer decoder predicts target-position embeddings
from an encoded context plus mask-token queries. Inference embeds a whole
trajectory through the neighborhood-enriched cell embeddings and the context
encoder, pooled to a single vector.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adjfuse import AdjFuseParams, apply_to_trajectory, init_adjfuse
from .autodiff import ParamStore, Tensor, no_grad
from .cells import CellGraph, EmbeddingTable
from .checkpoint import load_container, save_container
from .errors import CheckpointError, ConfigError, DataError
from .trajectory import CellTrajectory, GridSpec, Trajectory, trajectory_to_cells
from .transformer import (
    decoder_forward,
    encoder_forward,
    init_decoder,
    init_encoder,
    key_mask_bias,
)

POOLINGS = ("mean", "last")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 256
    enc_layers: int = 3
    enc_heads: int = 4
    pred_layers: int = 2
    pred_heads: int = 8
    max_len: int = 200
    m_targets: int = 4
    target_ratios: tuple[float, ...] = (0.10, 0.20, 0.30)
    successive_p: float = 0.50
    context_ratio_range: tuple[float, float] = (0.85, 1.00)
    ema_momentum: float = 0.996
    pooling: str = "mean"
    use_adjfuse: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "target_ratios", tuple(float(r) for r in self.target_ratios))
        object.__setattr__(self, "context_ratio_range", tuple(float(r) for r in self.context_ratio_range))
        for name in ("d", "enc_layers", "enc_heads", "pred_layers", "pred_heads", "max_len", "m_targets"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d % self.enc_heads or self.d % self.pred_heads:
            raise ConfigError(
                f"d={self.d} must be divisible by enc_heads={self.enc_heads} and pred_heads={self.pred_heads}"
            )
        if not self.target_ratios or any(not 0.0 < r < 1.0 for r in self.target_ratios):
            raise ConfigError(f"target_ratios must lie in (0, 1), got {self.target_ratios}")
        if not 0.0 <= self.successive_p <= 1.0:
            raise ConfigError(f"successive_p must lie in [0, 1], got {self.successive_p}")
        lo, hi = self.context_ratio_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError(f"context_ratio_range must satisfy 0 < lo <= hi <= 1, got {self.context_ratio_range}")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ConfigError(f"ema_momentum must lie in [0, 1], got {self.ema_momentum}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "enc_layers": self.enc_layers,
            "enc_heads": self.enc_heads,
            "pred_layers": self.pred_layers,
            "pred_heads": self.pred_heads,
            "max_len": self.max_len,
            "m_targets": self.m_targets,
            "target_ratios": list(self.target_ratios),
            "successive_p": self.successive_p,
            "context_ratio_range": list(self.context_ratio_range),
            "ema_momentum": self.ema_momentum,
            "pooling": self.pooling,
            "use_adjfuse": self.use_adjfuse,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "target_ratios" in kwargs:
            kwargs["target_ratios"] = tuple(kwargs["target_ratios"])
        if "context_ratio_range" in kwargs:
            kwargs["context_ratio_range"] = tuple(kwargs["context_ratio_range"])
        return cls(**kwargs)


@dataclass
class ModelState:
    cfg: ModelConfig
    store: ParamStore
    grid_hash: str
    adjfuse: AdjFuseParams


def _is_target_param(name: str) -> bool:
    return name.startswith("tgt_enc.") or name == "pos_emb.tgt"


def trainable_names(state: ModelState) -> list[str]:
    names = [n for n in state.store.names() if not _is_target_param(n)]
    if not state.cfg.use_adjfuse:
        names = [n for n in names if not n.startswith("adjfuse.")]
    return names


def _enrich(state: ModelState, seq: np.ndarray, tab: Tensor, graph: CellGraph) -> Tensor:
    """Cell vectors for a sequence, neighborhood-enriched unless ablated."""
    if not state.cfg.use_adjfuse:
        idx = np.asarray(seq, dtype=np.int64)
        bad = (idx < 0) | (idx >= graph.n_nodes)
        if bad.any():
            raise DataError(f"invalid cell id at position {int(np.flatnonzero(bad)[0])}")
        return ad.gather_rows(tab, idx)
    return apply_to_trajectory(seq, tab, graph, state.adjfuse)


def ema_pairs(store: ParamStore) -> list[tuple[str, str]]:
    """(target_name, source_name) for every EMA-tracked parameter."""
    pairs = [(n, "ctx_enc." + n[len("tgt_enc."):]) for n in store.names() if n.startswith("tgt_enc.")]
    if "pos_emb.tgt" in store:
        pairs.append(("pos_emb.tgt", "pos_emb.ctx"))
    return pairs


def init_model(cfg: ModelConfig, grid_hash: str, rng: np.random.Generator) -> ModelState:
    """Fresh parameters; the target branch starts as an exact copy of the context branch."""
    store = ParamStore()
    adjfuse = init_adjfuse(store, cfg.d, rng)
    init_encoder(store, "ctx_enc", cfg.d, cfg.enc_layers, rng)
    init_decoder(store, "pred", cfg.d, cfg.pred_layers, rng)
    store.add("mask_token", rng.normal(0.0, 0.02, size=cfg.d))
    store.add("pos_emb.ctx", rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.d)))
    store.add("pos_emb.pred", rng.normal(0.0, 0.02, size=(cfg.max_len, cfg.d)))
    for src in [n for n in store.names() if n.startswith("ctx_enc.")]:
        t = store.add("tgt_enc." + src[len("ctx_enc."):], store[src].data.copy())
        t.requires_grad = False
    t = store.add("pos_emb.tgt", store["pos_emb.ctx"].data.copy())
    t.requires_grad = False
    return ModelState(cfg=cfg, store=store, grid_hash=grid_hash, adjfuse=adjfuse)


def ema_update(state: ModelState, momentum: float | None = None) -> None:
    """theta_bar <- m * theta_bar + (1 - m) * theta, elementwise and in place."""
    m = state.cfg.ema_momentum if momentum is None else float(momentum)
    for tgt_name, src_name in ema_pairs(state.store):
        tgt, src = state.store[tgt_name], state.store[src_name]
        if tgt.data.shape != src.data.shape:
            raise ConfigError(f"EMA shape mismatch {tgt_name}: {tgt.data.shape} vs {src.data.shape}")
        tgt.data *= m
        tgt.data += (1.0 - m) * src.data


# ---------------------------------------------------------------------------
# sampling


def sample_targets(n: int, cfg: ModelConfig, rng: np.random.Generator) -> list[np.ndarray] | None:
    """M sorted target index sets; None signals a too-short trajectory to skip.

    One masking ratio is drawn per call and shared by all M sets. Each set is
    a contiguous run with probability ``successive_p``, else a uniform subset;
    sets from different draws may overlap each other.
    """
    if n < 4:
        return None
    r = cfg.target_ratios[int(rng.integers(len(cfg.target_ratios)))]
    size = max(1, int(round(r * n)))
    masks = []
    for _ in range(cfg.m_targets):
        if rng.random() < cfg.successive_p:
            start = int(rng.integers(0, n - size + 1))
            masks.append(np.arange(start, start + size, dtype=np.int64))
        else:
            masks.append(np.sort(rng.choice(n, size=size, replace=False)).astype(np.int64))
    return masks


def sample_context(n: int, cfg: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.context_ratio_range
    ratio = float(rng.uniform(lo, hi))
    size = max(1, int(round(ratio * n)))
    return np.sort(rng.choice(n, size=size, replace=False)).astype(np.int64)


def remove_overlap(context: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, bool]:
    """Context minus target, order kept; a fully-swallowed context falls back
    to its single index farthest from the target span's center, flagged."""
    context = np.asarray(context, dtype=np.int64)
    target = np.asarray(target, dtype=np.int64)
    keep = context[~np.isin(context, target)]
    if keep.size:
        return keep, False
    center = (int(target.min()) + int(target.max())) / 2.0
    j = context[int(np.argmax(np.abs(context - center)))]
    return np.array([j], dtype=np.int64), True


# ---------------------------------------------------------------------------
# forward paths


def _pos_table(state: ModelState, branch: str) -> Tensor:
    return state.store["pos_emb.tgt" if branch == "tgt" else "pos_emb.ctx"]


def _encode_padded(
    state: ModelState, tokens: Tensor, positions: np.ndarray, lengths: np.ndarray, branch: str
) -> Tensor:
    """Encoder over (B, n, d) with per-row valid lengths; positions index the
    learnable positional table at the points' original trajectory offsets."""
    prefix = "tgt_enc" if branch == "tgt" else "ctx_enc"
    x = ad.add(tokens, ad.gather_rows(_pos_table(state, branch), positions))
    bias = key_mask_bias(lengths, tokens.data.shape[1])
    return encoder_forward(state.store, prefix, x, state.cfg.enc_layers, state.cfg.enc_heads, bias)


def _check_positions(positions: np.ndarray, max_len: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.int64)
    if positions.ndim != 1 or positions.size == 0:
        raise DataError("positions must be a nonempty 1D index array")
    if positions[0] < 0 or positions[-1] >= max_len or np.any(np.diff(positions) <= 0):
        raise DataError(f"positions must be strictly increasing within [0, {max_len})")
    return positions


def encode(state: ModelState, tokens: Tensor, positions: np.ndarray, branch: str = "ctx") -> Tensor:
    """Encode one token sequence (n, d) at its original positions -> (n, d)."""
    if branch not in ("ctx", "tgt"):
        raise ConfigError(f"branch must be 'ctx' or 'tgt', got {branch!r}")
    positions = _check_positions(positions, state.cfg.max_len)
    n, d = tokens.data.shape
    if n != positions.size:
        raise DataError(f"{n} tokens but {positions.size} positions")
    if n > state.cfg.max_len:
        raise DataError(f"sequence length {n} exceeds max_len {state.cfg.max_len}")
    out = _encode_padded(
        state, ad.reshape(tokens, (1, n, d)), positions[None, :], np.array([n]), branch
    )
    return ad.reshape(out, (n, d))


def _predict_padded(
    state: ModelState,
    query_positions: np.ndarray,
    context: Tensor,
    ctx_lengths: np.ndarray,
    query_lengths: np.ndarray,
) -> Tensor:
    """Decode (R, t, d) predictions from mask-token queries over an encoded context."""
    q = ad.add(state.store["mask_token"], ad.gather_rows(state.store["pos_emb.pred"], query_positions))
    return decoder_forward(
        state.store,
        "pred",
        q,
        context,
        state.cfg.pred_layers,
        state.cfg.pred_heads,
        ctx_mask_bias=key_mask_bias(ctx_lengths, context.data.shape[1]),
        query_mask_bias=key_mask_bias(query_lengths, q.data.shape[1]),
    )


def predict(state: ModelState, context_repr: Tensor, target_positions: np.ndarray) -> Tensor:
    """Predict (t, d) target-position embeddings from one encoded context (c, d)."""
    positions = np.asarray(target_positions, dtype=np.int64)
    if positions.size == 0:
        raise DataError("target_positions must be nonempty")
    if positions.min() < 0 or positions.max() >= state.cfg.max_len:
        raise DataError(f"target positions outside [0, {state.cfg.max_len})")
    c = context_repr.data.shape[0]
    if c == 0:
        raise DataError("empty context")
    out = _predict_padded(
        state,
        positions[None, :],
        ad.reshape(context_repr, (1, c, state.cfg.d)),
        np.array([c]),
        np.array([positions.size]),
    )
    return ad.reshape(out, (positions.size, state.cfg.d))


@dataclass
class JepaOutput:
    loss: Tensor
    targets: list[np.ndarray]
    predictions: list[np.ndarray]
    target_masks: list[np.ndarray]
    context_sets: list[np.ndarray]
    fallbacks: int


@dataclass
class JepaBatchOutput:
    loss: Tensor
    targets: list[list[np.ndarray]]
    predictions: list[list[np.ndarray]]
    target_masks: list[list[np.ndarray]]
    context_sets: list[list[np.ndarray]]
    fallbacks: int
    skipped: int


def _as_table(table: EmbeddingTable | Tensor) -> Tensor:
    return table if isinstance(table, Tensor) else Tensor(table.vectors)


def _as_cells(t: CellTrajectory | np.ndarray) -> np.ndarray:
    return np.asarray(t.cells if isinstance(t, CellTrajectory) else t, dtype=np.int64)


def jepa_forward_batch(
    batch: list[CellTrajectory | np.ndarray],
    table: EmbeddingTable | Tensor,
    graph: CellGraph,
    state: ModelState,
    rng: np.random.Generator,
) -> JepaBatchOutput | None:
    """One training forward over a batch of cell sequences.

    Too-short sequences (n < 4) are skipped and counted. Targets come from
    the target encoder over each full sequence, constant by construction (no
    graph is built for them); predictions come from the context branch. The
    loss averages the per-target smooth-L1 means over every kept item.
    Returns None when nothing in the batch is usable.
    """
    cfg = state.cfg
    tab = _as_table(table)
    seqs = []
    skipped = 0
    for item in batch:
        cells = _as_cells(item)
        n = cells.shape[0]
        if n > cfg.max_len:
            raise DataError(f"sequence length {n} exceeds max_len {cfg.max_len}")
        if n < 4:
            skipped += 1
            continue
        seqs.append(cells)
    if not seqs:
        return None

    masks_b: list[list[np.ndarray]] = []
    ctx_b: list[np.ndarray] = []
    per_ctx_b: list[list[np.ndarray]] = []
    fallbacks = 0
    for cells in seqs:
        n = cells.shape[0]
        masks = sample_targets(n, cfg, rng)
        ctx = sample_context(n, cfg, rng)
        per = []
        for m in masks:
            kept, flagged = remove_overlap(ctx, m)
            per.append(kept)
            fallbacks += flagged
        masks_b.append(masks)
        ctx_b.append(ctx)
        per_ctx_b.append(per)

    lengths = np.array([c.shape[0] for c in seqs])
    offsets = np.concatenate([[0], np.cumsum(lengths)])
    h_all = _enrich(state, np.concatenate(seqs), tab, graph)

    # target branch: full sequences, constant inputs, no graph
    b, nmax, d = len(seqs), int(lengths.max()), cfg.d
    full_tok = np.zeros((b, nmax, d), dtype=np.float32)
    full_pos = np.zeros((b, nmax), dtype=np.int64)
    for i, n in enumerate(lengths):
        full_tok[i, :n] = h_all.data[offsets[i]:offsets[i] + n]
        full_pos[i, :n] = np.arange(n)
    with no_grad():
        t_out = _encode_padded(state, Tensor(full_tok), full_pos, lengths, branch="tgt")
    targets = [[t_out.data[i][m] for m in masks_b[i]] for i in range(b)]

    # context branch: one encoder row per (item, target)
    rows_idx: list[np.ndarray] = []
    rows_pos: list[np.ndarray] = []
    for i in range(b):
        for kept in per_ctx_b[i]:
            rows_idx.append(offsets[i] + kept)
            rows_pos.append(kept)
    r = len(rows_idx)
    c_lengths = np.array([x.shape[0] for x in rows_idx])
    cmax = int(c_lengths.max())
    idx_mat = np.zeros((r, cmax), dtype=np.int64)
    pos_mat = np.zeros((r, cmax), dtype=np.int64)
    for j in range(r):
        idx_mat[j, :c_lengths[j]] = rows_idx[j]
        pos_mat[j, :c_lengths[j]] = rows_pos[j]
    ctx_out = _encode_padded(state, ad.gather_rows(h_all, idx_mat), pos_mat, c_lengths, branch="ctx")

    # predictor: mask-token queries at target positions, cross-attending context
    q_lengths = np.array([m.shape[0] for masks in masks_b for m in masks])
    tmax = int(q_lengths.max())
    q_pos = np.zeros((r, tmax), dtype=np.int64)
    tgt_block = np.zeros((r, tmax, d), dtype=np.float32)
    weights = np.zeros((r, tmax, 1), dtype=np.float32)
    j = 0
    for i in range(b):
        for k, m in enumerate(masks_b[i]):
            q_pos[j, :m.shape[0]] = m
            tgt_block[j, :m.shape[0]] = targets[i][k]
            weights[j, :m.shape[0], 0] = 1.0 / (r * m.shape[0] * d)
            j += 1
    preds = _predict_padded(state, q_pos, ctx_out, c_lengths, q_lengths)
    loss = ad.reduce_sum(ad.mul(ad.smooth_l1_elts(preds, Tensor(tgt_block)), Tensor(weights)))

    pred_slices = [
        [preds.data[i * cfg.m_targets + k, :masks_b[i][k].shape[0]].copy() for k in range(cfg.m_targets)]
        for i in range(b)
    ]
    return JepaBatchOutput(
        loss=loss,
        targets=targets,
        predictions=pred_slices,
        target_masks=masks_b,
        context_sets=[[c for c in per] for per in per_ctx_b],
        fallbacks=fallbacks,
        skipped=skipped,
    )


def jepa_forward(
    t: CellTrajectory | np.ndarray,
    table: EmbeddingTable | Tensor,
    graph: CellGraph,
    state: ModelState,
    rng: np.random.Generator,
) -> JepaOutput:
    cells = _as_cells(t)
    if cells.shape[0] < 4:
        raise DataError(f"trajectory too short for prediction training: {cells.shape[0]} < 4 points")
    out = jepa_forward_batch([cells], table, graph, state, rng)
    return JepaOutput(
        loss=out.loss,
        targets=out.targets[0],
        predictions=out.predictions[0],
        target_masks=out.target_masks[0],
        context_sets=out.context_sets[0],
        fallbacks=out.fallbacks,
    )


# ---------------------------------------------------------------------------
# inference


def embed_cells(
    cells: CellTrajectory | np.ndarray,
    table: EmbeddingTable | Tensor,
    graph: CellGraph,
    state: ModelState,
    pooling: str | None = None,
) -> np.ndarray:
    """Embed one cell sequence without any sampling: enrich, encode, pool."""
    pooling = state.cfg.pooling if pooling is None else pooling
    if pooling not in POOLINGS:
        raise ConfigError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
    seq = _as_cells(cells)
    n = seq.shape[0]
    if n == 0:
        raise DataError("cannot embed an empty trajectory")
    if n > state.cfg.max_len:
        raise DataError(f"sequence length {n} exceeds max_len {state.cfg.max_len}")
    with no_grad():
        h = _enrich(state, seq, _as_table(table), graph)
        out = _encode_padded(state, ad.reshape(h, (1, n, state.cfg.d)), np.arange(n)[None, :], np.array([n]), "ctx")
    tokens = out.data[0]
    return tokens.mean(axis=0) if pooling == "mean" else tokens[-1].copy()


def embed_trajectory(
    t: Trajectory,
    grid: GridSpec,
    table: EmbeddingTable | Tensor,
    graph: CellGraph,
    state: ModelState,
    pooling: str | None = None,
) -> np.ndarray:
    """F(T): map to grid cells, enrich, run the context encoder, pool to (d,)."""
    return embed_cells(trajectory_to_cells(t, grid), table, graph, state, pooling)


def embedding_distance(a: np.ndarray, b: np.ndarray, cosine: bool = False) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DataError(f"embedding shape mismatch: {a.shape} vs {b.shape}")
    if cosine:
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            raise DataError("cosine distance undefined for zero-norm embeddings")
        return float(1.0 - np.dot(a, b) / (na * nb))
    return float(np.linalg.norm(a - b))


# ---------------------------------------------------------------------------
# persistence


def model_config_hash(cfg: ModelConfig, grid_hash: str) -> str:
    canon = json.dumps({"model": cfg.to_dict(), "grid_hash": grid_hash}, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


_REQUIRED_NAMES = ("adjfuse.kernel", "adjfuse.bias", "adjfuse.proj", "mask_token",
                   "pos_emb.ctx", "pos_emb.tgt", "pos_emb.pred")


def save_model(path: str, state: ModelState) -> None:
    tensors = {name: t.data for name, t in state.store.params.items()}
    meta = {"model_config": state.cfg.to_dict(), "grid_hash": state.grid_hash}
    save_container(path, tensors, model_config_hash(state.cfg, state.grid_hash), meta)


def load_model(path: str, expect_grid_hash: str | None = None) -> ModelState:
    tensors, meta, config_hash = load_container(path)
    try:
        cfg = ModelConfig.from_dict(meta["model_config"])
        grid_hash = meta["grid_hash"]
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: bad model metadata: {exc}") from None
    if config_hash != model_config_hash(cfg, grid_hash):
        raise CheckpointError(f"{path}: config hash does not match embedded metadata")
    if expect_grid_hash is not None and grid_hash != expect_grid_hash:
        raise CheckpointError(f"{path}: checkpoint was built for a different grid")
    missing = [n for n in _REQUIRED_NAMES if n not in tensors]
    if missing:
        raise CheckpointError(f"{path}: checkpoint missing tensors {missing}")
    store = ParamStore()
    for name, arr in tensors.items():
        t = store.add(name, arr)
        if _is_target_param(name):
            t.requires_grad = False
    adjfuse = AdjFuseParams(
        kernel=store["adjfuse.kernel"], bias=store["adjfuse.bias"], proj=store["adjfuse.proj"]
    )
    return ModelState(cfg=cfg, store=store, grid_hash=grid_hash, adjfuse=adjfuse)


_EXPORT_MAGIC = b"TJVE"
_EXPORT_VERSION = 1


def save_embedding_matrix(path: str, ids: list[str], matrix: np.ndarray) -> None:
    """Binary (count, d) float32 matrix plus a ``.ids`` text sidecar, one id per row."""
    matrix = np.ascontiguousarray(np.asarray(matrix, dtype=np.float32))
    if matrix.ndim != 2:
        raise DataError(f"embedding matrix must be 2D, got shape {matrix.shape}")
    if len(ids) != matrix.shape[0]:
        raise DataError(f"{len(ids)} ids for {matrix.shape[0]} embedding rows")
    for i in ids:
        if "\n" in i or not i:
            raise DataError(f"embedding id {i!r} is empty or contains a newline")
    with open(path, "wb") as f:
        f.write(_EXPORT_MAGIC)
        f.write(struct.pack("<III", _EXPORT_VERSION, matrix.shape[0], matrix.shape[1]))
        f.write(matrix.tobytes())
    with open(path + ".ids", "w", encoding="utf-8") as f:
        f.writelines(i + "\n" for i in ids)


def load_embedding_matrix(path: str) -> tuple[list[str], np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _EXPORT_MAGIC:
        raise CheckpointError(f"{path}: not an embedding matrix file")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, count, d = struct.unpack_from("<III", blob, 4)
    if version != _EXPORT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    payload = blob[16:]
    if len(payload) != count * d * 4:
        raise CheckpointError(f"{path}: expected {count * d * 4} payload bytes, found {len(payload)}")
    matrix = np.frombuffer(payload, dtype=np.float32).reshape(count, d).copy()
    with open(path + ".ids", encoding="utf-8") as f:
        ids = [line.rstrip("\n") for line in f]
    if len(ids) != count:
        raise CheckpointError(f"{path}.ids: {len(ids)} ids for {count} embedding rows")
    return ids, matrix
