"""Minimal reverse-mode automatic differentiation over numpy arrays.

Forward math is float32 (float64 inside the gradient checker). A Tensor
records its parents and a backward closure; ``backward`` walks the graph
in reverse topological order. Ops that run under :class:`no_grad`, or
whose inputs all have ``requires_grad=False``, produce leaf tensors, so
inference and the stop-gradient target branch build no graph at all.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import NumericError

_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable graph construction; used for inference and EMA target branches."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class Tensor:
    """A numpy array plus the closure that routes gradients to its parents."""

    __slots__ = ("data", "grad", "requires_grad", "parents", "bwd")

    def __init__(self, data, requires_grad=False, parents=(), bwd=None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            # numpy scalar from a reduction: keep its dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float32)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.bwd = bwd

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"


def param(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


def const(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def _make(data, parents, bwd) -> Tensor:
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, bwd=bwd)
    return Tensor(data)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into .grad over the whole graph."""
    if loss.data.size != 1:
        raise NumericError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node.bwd is not None:
            node.bwd(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = a.data * a.data.dtype.type(s)

    def bwd(g):
        _accum(a, g * a.data.dtype.type(s))

    return _make(out, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise NumericError(f"matmul shape mismatch: {a.data.shape} @ {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.data.ndim > 1 else np.outer(g, b.data)
            _accum(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            if a.data.ndim > 1:
                gb = np.swapaxes(a.data, -1, -2) @ g
            else:
                gb = np.outer(a.data, g)
            _accum(b, _unbroadcast(gb, b.data.shape))

    return _make(out, (a, b), bwd)


def linear_rows(x: Tensor, w: Tensor) -> Tensor:
    """Row-wise projection x @ w via einsum's fixed-order loops.

    Unlike BLAS matmul, the result for each row is bitwise independent of
    how many rows are in the batch; AdjFuse relies on this.
    """
    if x.data.shape[-1] != w.data.shape[0]:
        raise NumericError(f"linear_rows shape mismatch: {x.data.shape} @ {w.data.shape}")
    out = np.einsum("...d,de->...e", x.data, w.data)

    def bwd(g):
        if x.requires_grad:
            _accum(x, np.einsum("...e,de->...d", g, w.data))
        if w.requires_grad:
            gx = x.data.reshape(-1, x.data.shape[-1])
            gg = g.reshape(-1, g.shape[-1])
            _accum(w, np.einsum("nd,ne->de", gx, gg))

    return _make(out, (x, w), bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, x.data.dtype.type(0))

    def bwd(g):
        _accum(x, g * mask)

    return _make(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bwd(g):
        _accum(x, g * out)

    return _make(out, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bwd(g):
        _accum(x, g * (0.5 / out))

    return _make(out, (x,), bwd)


def reshape(x: Tensor, shape) -> Tensor:
    orig = x.data.shape
    out = x.data.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(orig))

    return _make(out, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(x, np.transpose(g, inv))

    return _make(out, (x,), bwd)


def concat(xs: list, axis: int = 0) -> Tensor:
    out = np.concatenate([x.data for x in xs], axis=axis)
    sizes = [x.data.shape[axis] for x in xs]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for x, lo, hi in zip(xs, offsets[:-1], offsets[1:]):
            if x.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(x, g[tuple(sl)])

    return _make(out, tuple(xs), bwd)


def gather_rows(table: Tensor, idx) -> Tensor:
    """out[...] = table[idx[...]] for a 2D table; backward scatter-adds.

    Serves both embedding lookups (idx into a parameter table) and
    sequence slicing (idx into encoder outputs).
    """
    idx = np.asarray(idx, dtype=np.int64)
    if table.data.ndim != 2:
        raise NumericError(f"gather_rows needs a 2D table, got {table.data.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise NumericError(f"gather index outside [0, {table.data.shape[0]})")
    out = table.data[idx]

    def bwd(g):
        n, d = table.data.shape
        flat_idx = (idx.reshape(-1, 1) * d + np.arange(d)).ravel()
        sums = np.bincount(flat_idx, weights=g.reshape(-1, d).ravel(), minlength=n * d)
        _accum(table, sums.reshape(n, d).astype(table.data.dtype))

    return _make(out, (table,), bwd)


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(x, np.broadcast_to(g, x.data.shape).astype(x.data.dtype))

    return _make(out, (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else x.data.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, (g - dot) * out)

    return _make(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bwd(g):
        if gain.requires_grad:
            _accum(gain, (g * xhat).reshape(-1, x.data.shape[-1]).sum(axis=0))
        if bias.requires_grad:
            _accum(bias, g.reshape(-1, x.data.shape[-1]).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gain.data
            d = x.data.shape[-1]
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            _accum(x, gx.astype(x.data.dtype))

    return _make(out, (x, gain, bias), bwd)


def smooth_l1_elts(pred: Tensor, target: Tensor) -> Tensor:
    """Elementwise Smooth-L1 without reduction; lets callers mask padding."""
    if pred.data.shape != target.data.shape:
        raise NumericError(
            f"smooth_l1_elts shape mismatch: {pred.data.shape} vs {target.data.shape}"
        )
    x = pred.data - target.data
    absx = np.abs(x)
    small = absx < 1.0
    out = np.where(small, 0.5 * x * x, absx - 0.5)

    def bwd(g):
        d = np.where(small, x, np.sign(x)) * g
        if pred.requires_grad:
            _accum(pred, d.astype(pred.data.dtype))
        if target.requires_grad:
            _accum(target, (-d).astype(target.data.dtype))

    return _make(out, (pred, target), bwd)


def smooth_l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean Smooth-L1: 0.5 x^2 for |x| < 1, |x| - 0.5 beyond; x = pred - target."""
    if pred.data.shape != target.data.shape:
        raise NumericError(
            f"smooth_l1 shape mismatch: {pred.data.shape} vs {target.data.shape}"
        )
    x = pred.data - target.data
    absx = np.abs(x)
    small = absx < 1.0
    elems = np.where(small, 0.5 * x * x, absx - 0.5)
    out = elems.mean(dtype=pred.data.dtype)
    n = x.size

    def bwd(g):
        d = np.where(small, x, np.sign(x)) * (g / n)
        if pred.requires_grad:
            _accum(pred, d.astype(pred.data.dtype))
        if target.requires_grad:
            _accum(target, (-d).astype(target.data.dtype))

    return _make(np.asarray(out), (pred, target), bwd)


class ParamStore:
    """Named parameters plus Adam moments; one owner mutates it at a time."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise NumericError(f"duplicate parameter name {name!r}")
        t = param(data)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def adopt(self, name: str, t: Tensor) -> Tensor:
        """Register an existing Tensor (shared object) under this store.

        Lets an optimizer store hold a subset of a model's parameters while
        gradients still land on the model's own Tensor objects.
        """
        if name in self.params:
            raise NumericError(f"duplicate parameter name {name!r}")
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())


def adam_step(
    store: ParamStore,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One Adam update with bias correction over every parameter in the store.

    Parameters whose grad is None (unused this step) are treated as having
    zero gradient. NaN gradients abort, signaling a poisoned training step.
    """
    b1, b2 = betas
    store.t += 1
    t = store.t
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        if g.shape != p.data.shape:
            raise NumericError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} for {name!r}"
            )
        m = store.m[name]
        v = store.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


def grad_check(f, params: dict[str, np.ndarray], h: float = 1e-4) -> float:
    """Max relative error between backprop and central finite differences.

    ``f`` maps a dict of named Tensors to a scalar Tensor and must be
    deterministic. Everything runs in float64.
    """
    tensors = {k: param(np.asarray(v, dtype=np.float64), dtype=np.float64) for k, v in params.items()}
    loss = f(tensors)
    backward(loss)
    worst = 0.0
    for name, t in tensors.items():
        ad = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f({k: Tensor(v.data) for k, v in tensors.items()}).data)
            flat[i] = orig - h
            dn = float(f({k: Tensor(v.data) for k, v in tensors.items()}).data)
            flat[i] = orig
            fd = (up - dn) / (2 * h)
            a = ad.ravel()[i]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
