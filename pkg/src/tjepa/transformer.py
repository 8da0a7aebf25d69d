"""Transformer encoder/decoder blocks on top of the autodiff substrate.

Everything operates on batched (B, n, d) tensors. Blocks are pre-layer-norm
residual blocks with a final layer norm after the stack. Padding is handled
by additive key masks (0 for real positions, a large negative bias for pad),
built by the caller.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import NumericError

MASK_BIAS = -1e9


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


def init_attention(store: ParamStore, prefix: str, d: int, rng: np.random.Generator) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        store.add(f"{prefix}.{name}", xavier(rng, d, d))
    for name in ("bq", "bk", "bv", "bo"):
        store.add(f"{prefix}.{name}", np.zeros(d, dtype=np.float32))


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    params: dict[str, Tensor],
    n_heads: int,
    mask_bias: Tensor | None = None,
    causal: bool = False,
) -> Tensor:
    """Scaled dot-product attention over (B, n, d) inputs.

    Self-attention when q_in is kv_in, cross-attention otherwise.
    ``mask_bias`` is broadcast-added to the logits (shape (B, 1, 1, n_k)).
    """
    b, nq, d = q_in.data.shape
    nk = kv_in.data.shape[1]
    if d % n_heads != 0:
        raise NumericError(f"model dim {d} not divisible by n_heads {n_heads}")
    dh = d // n_heads

    def split(x: Tensor, n: int) -> Tensor:
        return ad.transpose(ad.reshape(x, (b, n, n_heads, dh)), (0, 2, 1, 3))

    q = split(ad.add(ad.matmul(q_in, params["wq"]), params["bq"]), nq)
    k = split(ad.add(ad.matmul(kv_in, params["wk"]), params["bk"]), nk)
    v = split(ad.add(ad.matmul(kv_in, params["wv"]), params["bv"]), nk)

    logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    if causal:
        tri = np.triu(np.full((nq, nk), MASK_BIAS, dtype=np.float32), k=1)
        logits = ad.add(logits, Tensor(tri))
    if mask_bias is not None:
        logits = ad.add(logits, mask_bias)
    attn = ad.softmax(logits, axis=-1)
    mixed = ad.matmul(attn, v)  # (b, h, nq, dh)
    merged = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, nq, d))
    return ad.add(ad.matmul(merged, params["wo"]), params["bo"])


def _attn_params(store: ParamStore, prefix: str) -> dict[str, Tensor]:
    return {n: store[f"{prefix}.{n}"] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def _init_ln(store: ParamStore, prefix: str, d: int) -> None:
    store.add(f"{prefix}.g", np.ones(d, dtype=np.float32))
    store.add(f"{prefix}.b", np.zeros(d, dtype=np.float32))


def _ln(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, store[f"{prefix}.g"], store[f"{prefix}.b"])


def _init_ffn(store: ParamStore, prefix: str, d: int, d_ff: int, rng) -> None:
    store.add(f"{prefix}.w1", xavier(rng, d, d_ff))
    store.add(f"{prefix}.b1", np.zeros(d_ff, dtype=np.float32))
    store.add(f"{prefix}.w2", xavier(rng, d_ff, d))
    store.add(f"{prefix}.b2", np.zeros(d, dtype=np.float32))


def _ffn(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, store[f"{prefix}.w1"]), store[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, store[f"{prefix}.w2"]), store[f"{prefix}.b2"])


def init_encoder(
    store: ParamStore, prefix: str, d: int, n_layers: int, rng: np.random.Generator, d_ff: int | None = None
) -> None:
    d_ff = 4 * d if d_ff is None else d_ff
    for i in range(n_layers):
        init_attention(store, f"{prefix}.layer{i}.attn", d, rng)
        _init_ln(store, f"{prefix}.layer{i}.ln1", d)
        _init_ln(store, f"{prefix}.layer{i}.ln2", d)
        _init_ffn(store, f"{prefix}.layer{i}.ffn", d, d_ff, rng)
    _init_ln(store, f"{prefix}.final_ln", d)


def encoder_forward(
    store: ParamStore,
    prefix: str,
    x: Tensor,
    n_layers: int,
    n_heads: int,
    mask_bias: Tensor | None = None,
) -> Tensor:
    """Pre-LN self-attention encoder over (B, n, d); returns (B, n, d)."""
    h = x
    for i in range(n_layers):
        lp = f"{prefix}.layer{i}"
        normed = _ln(store, f"{lp}.ln1", h)
        h = ad.add(h, multi_head_attention(normed, normed, _attn_params(store, f"{lp}.attn"), n_heads, mask_bias))
        h = ad.add(h, _ffn(store, f"{lp}.ffn", _ln(store, f"{lp}.ln2", h)))
    return _ln(store, f"{prefix}.final_ln", h)


def init_decoder(
    store: ParamStore, prefix: str, d: int, n_layers: int, rng: np.random.Generator, d_ff: int | None = None
) -> None:
    d_ff = 4 * d if d_ff is None else d_ff
    for i in range(n_layers):
        init_attention(store, f"{prefix}.layer{i}.self_attn", d, rng)
        init_attention(store, f"{prefix}.layer{i}.cross_attn", d, rng)
        _init_ln(store, f"{prefix}.layer{i}.ln1", d)
        _init_ln(store, f"{prefix}.layer{i}.ln2", d)
        _init_ln(store, f"{prefix}.layer{i}.ln3", d)
        _init_ffn(store, f"{prefix}.layer{i}.ffn", d, d_ff, rng)
    _init_ln(store, f"{prefix}.final_ln", d)


def decoder_forward(
    store: ParamStore,
    prefix: str,
    queries: Tensor,
    context: Tensor,
    n_layers: int,
    n_heads: int,
    ctx_mask_bias: Tensor | None = None,
    query_mask_bias: Tensor | None = None,
) -> Tensor:
    """Pre-LN decoder: query self-attention, cross-attention to context, FFN."""
    h = queries
    for i in range(n_layers):
        lp = f"{prefix}.layer{i}"
        normed = _ln(store, f"{lp}.ln1", h)
        h = ad.add(
            h,
            multi_head_attention(normed, normed, _attn_params(store, f"{lp}.self_attn"), n_heads, query_mask_bias),
        )
        h = ad.add(
            h,
            multi_head_attention(
                _ln(store, f"{lp}.ln2", h), context, _attn_params(store, f"{lp}.cross_attn"), n_heads, ctx_mask_bias
            ),
        )
        h = ad.add(h, _ffn(store, f"{lp}.ffn", _ln(store, f"{lp}.ln3", h)))
    return _ln(store, f"{prefix}.final_ln", h)


def key_mask_bias(lengths: np.ndarray, n: int) -> Tensor:
    """(B, 1, 1, n) additive bias: 0 for positions < length, MASK_BIAS beyond."""
    b = lengths.shape[0]
    bias = np.where(np.arange(n)[None, :] < lengths[:, None], 0.0, MASK_BIAS).astype(np.float32)
    return Tensor(bias.reshape(b, 1, 1, n))
