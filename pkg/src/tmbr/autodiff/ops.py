"""Differentiable primitives.

Every primitive takes :class:`Tensor` inputs plus plain-Python attributes
and returns a new tensor.  Broadcasting is limited to a right operand whose
shape equals the trailing shape of the left operand (bias-style).
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, record

PRIMITIVES: dict[str, Callable[..., Tensor]] = {}


def primitive(kind: str):
    def register(fn):
        PRIMITIVES[kind] = fn
        return fn

    return register


def primitive_forward(inputs: Sequence[Tensor], kind: str, attrs: dict | None = None) -> Tensor:
    """Dispatch ``kind`` by name; the generic entry point to every primitive."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **(attrs or {}))


def _shapes(*ts) -> str:
    return " and ".join(str(tuple(t.shape)) for t in ts)


def _trailing_ok(a: Tensor, b: Tensor) -> bool:
    return a.shape == b.shape or (b.ndim <= a.ndim and a.shape[a.ndim - b.ndim :] == b.shape)


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# --------------------------------------------------------------------- linear


@primitive("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {_shapes(a, b)}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ {_shapes(a, b)}")
    x, w = a.data, b.data
    out = x @ w

    def backward(g):
        if w.ndim == 2:
            k, m = w.shape
            ga = g @ w.T
            gb = x.reshape(-1, k).T @ g.reshape(-1, m)
        else:
            ga = g @ _swap(w)
            gb = _swap(x) @ g
        return ga, gb

    return record("matmul", (a, b), out, backward)


@primitive("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    if not _trailing_ok(a, b):
        raise ShapeError(f"add: incompatible shapes {_shapes(a, b)}")
    out = a.data + b.data
    shape_b = b.shape

    def backward(g):
        return g, _sum_to(g, shape_b)

    return record("add", (a, b), out, backward)


@primitive("element_mul")
def element_mul(a: Tensor, b: Tensor) -> Tensor:
    if not _trailing_ok(a, b):
        raise ShapeError(f"element_mul: incompatible shapes {_shapes(a, b)}")
    x, y = a.data, b.data
    out = x * y

    def backward(g):
        return g * y, _sum_to(g * x, y.shape)

    return record("element_mul", (a, b), out, backward)


@primitive("scale")
def scale(a: Tensor, factor: float) -> Tensor:
    out = a.data * a.data.dtype.type(factor)

    def backward(g):
        return (g * factor,)

    return record("scale", (a,), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


@primitive("concat")
def concat(*tensors: Tensor, axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = list(tensors[0].shape)
    ax = axis % len(ref)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or other[:ax] + other[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(f"concat: incompatible shapes {_shapes(*tensors)} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record("concat", tensors, out, backward)


@primitive("outer_concat")
def outer_concat(a: Tensor, b: Tensor) -> Tensor:
    """(T, Da) x (U, Db) -> (T, U, Da + Db) with every row pair concatenated."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"outer_concat: expected two matrices, got {_shapes(a, b)}")
    T, da = a.shape
    U, db = b.shape
    out = np.concatenate(
        [np.broadcast_to(a.data[:, None, :], (T, U, da)), np.broadcast_to(b.data[None, :, :], (T, U, db))],
        axis=-1,
    )

    def backward(g):
        return g[..., :da].sum(axis=1), g[..., da:].sum(axis=0)

    return record("outer_concat", (a, b), out, backward)


# ---------------------------------------------------------------- reshaping


@primitive("reshape")
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    src = a.shape

    def backward(g):
        return (g.reshape(src),)

    return record("reshape", (a,), out, backward)


@primitive("slice")
def take_slice(a: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % a.ndim
    index = [slice(None)] * a.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    out = a.data[index]
    src, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(src, dtype=dtype)
        full[index] = g
        return (full,)

    return record("slice", (a,), out, backward)


@primitive("gather")
def gather(a: Tensor, index: tuple) -> Tensor:
    """Advanced indexing ``a[index]`` where ``index`` is a tuple of int arrays."""
    index = tuple(np.asarray(i) for i in index)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"gather: {exc} for shape {a.shape}") from None
    src, dtype = a.shape, a.data.dtype

    def backward(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return record("gather", (a,), np.ascontiguousarray(out), backward)


@primitive("sum")
def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, dtype=np.float64), dtype=a.data.dtype)
    src = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return record("sum", (a,), out, backward)


def mean(a: Tensor) -> Tensor:
    return scale(reduce_sum(a), 1.0 / max(a.size, 1))


# -------------------------------------------------------------- pointwise


@primitive("sigmoid")
def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return record("sigmoid", (a,), out, backward)


@primitive("tanh")
def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return record("tanh", (a,), out, backward)


@primitive("relu")
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = np.where(mask, a.data, 0).astype(a.data.dtype)

    def backward(g):
        return (g * mask,)

    return record("relu", (a,), out, backward)


def _softmax64(x: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Shifted logits and log-normaliser, accumulated in float64."""
    z = x.astype(np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return z, log_norm


@primitive("softmax")
def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z, log_norm = _softmax64(a.data, axis)
    p64 = np.exp(z - log_norm)
    out = p64.astype(a.data.dtype)

    def backward(g):
        inner = (g * p64).sum(axis=axis, keepdims=True)
        return ((p64 * (g - inner)).astype(g.dtype),)

    return record("softmax", (a,), out, backward)


@primitive("log_softmax")
def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z, log_norm = _softmax64(a.data, axis)
    ls = z - log_norm
    out = ls.astype(a.data.dtype)

    def backward(g):
        total = g.sum(axis=axis, keepdims=True, dtype=np.float64)
        return ((g - np.exp(ls) * total).astype(g.dtype),)

    return record("log_softmax", (a,), out, backward)


@primitive("dropout")
def dropout(a: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Inverted dropout; the identity when not training."""
    if not training or p <= 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout: p must be in [0, 1), got {p}")
    rng = rng if rng is not None else np.random.default_rng()
    mask = ((rng.random(a.shape) >= p) / (1.0 - p)).astype(a.data.dtype)
    out = a.data * mask

    def backward(g):
        return (g * mask,)

    return record("dropout", (a,), out, backward)


# ----------------------------------------------------------------- layers


@primitive("embedding_lookup")
def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table {table.shape}")
    out = table.data[ids]
    src, dtype = table.shape, table.data.dtype

    def backward(g):
        full = np.zeros(src, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return record("embedding_lookup", (table,), out, backward)


def _spliced_linear(kind, x, weight, bias, idx, valid):
    """Shared body of the two 1-D convolutions: gather frames, then project."""
    T_out, K = idx.shape
    C = x.shape[1]
    frames = x.data[idx] if valid is None else np.where(valid[..., None], x.data[idx], 0).astype(x.data.dtype)
    spliced = frames.reshape(T_out, K * C)
    out = spliced @ weight.data
    if bias is not None:
        out = out + bias.data
    src, dtype = x.shape, x.data.dtype
    w = weight.data

    def backward(g):
        gs = (g @ w.T).reshape(T_out, K, C)
        if valid is not None:
            gs = gs * valid[..., None]
        gx = np.zeros(src, dtype=dtype)
        np.add.at(gx, idx, gs)
        grads = [gx, spliced.T @ g]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(kind, inputs, out, backward)


@primitive("conv1d_context")
def conv1d_context(x: Tensor, weight: Tensor, bias: Tensor | None = None, offsets=(0,), stride: int = 1) -> Tensor:
    """Time-delay layer: output frame ``j`` reads input frames
    ``j*stride + o`` for every ``o`` in ``offsets``.  Frames past either edge
    are clamped to the nearest valid frame, so ``ceil(T / stride)`` frames
    come out.  ``weight`` is ``(len(offsets) * C_in, C_out)``.
    """
    offsets = np.asarray(offsets, dtype=np.int64)
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[0] != len(offsets) * x.shape[1]:
        raise ShapeError(f"conv1d_context: incompatible shapes {_shapes(x, weight)} for {len(offsets)} offsets")
    if stride < 1:
        raise ShapeError(f"conv1d_context: stride must be >= 1, got {stride}")
    T = x.shape[0]
    centers = np.arange(0, T, stride)
    idx = np.clip(centers[:, None] + offsets[None, :], 0, T - 1)
    return _spliced_linear("conv1d_context", x, weight, bias, idx, None)


@primitive("conv1d_causal")
def conv1d_causal(x: Tensor, weight: Tensor, bias: Tensor | None = None, kernel: int = 1) -> Tensor:
    """Causal convolution: output ``u`` reads inputs ``u, u-1, ..., u-kernel+1``
    (zero before the sequence start).  ``weight`` rows are ordered newest
    frame first.
    """
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[0] != kernel * x.shape[1]:
        raise ShapeError(f"conv1d_causal: incompatible shapes {_shapes(x, weight)} for kernel {kernel}")
    U = x.shape[0]
    raw = np.arange(U)[:, None] - np.arange(kernel)[None, :]
    valid = raw >= 0
    idx = np.where(valid, raw, 0)
    return _spliced_linear("conv1d_causal", x, weight, bias, idx, valid)


@primitive("layer_norm")
def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm: incompatible shapes {_shapes(x, gamma, beta)}")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mu) * inv
    out = (xhat * gamma.data + beta.data).astype(x.data.dtype)
    gam = gamma.data
    dtype = x.data.dtype

    def backward(g):
        gxhat = g * gam
        m1 = gxhat.mean(axis=-1, keepdims=True)
        m2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
        gx = (inv * (gxhat - m1 - xhat * m2)).astype(dtype)
        return gx, _sum_to(g * xhat, gam.shape).astype(dtype), _sum_to(g, gam.shape)

    return record("layer_norm", (x, gamma, beta), out, backward)


@primitive("multi_head_attention")
def multi_head_attention(
    x: Tensor,
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    heads: int = 1,
    causal: bool = False,
) -> Tensor:
    """Scaled dot-product self-attention over a ``(L, D)`` sequence.

    With ``causal=True`` query ``i`` attends only to keys ``j <= i``.
    """
    if x.ndim != 2:
        raise ShapeError(f"multi_head_attention: expected (L, D) input, got {x.shape}")
    L, D = x.shape
    for w in (wq, wk, wv, wo):
        if w.shape != (D, D):
            raise ShapeError(f"multi_head_attention: weight {w.shape} does not match model dim {D}")
    if D % heads:
        raise ShapeError(f"multi_head_attention: model dim {D} not divisible by {heads} heads")
    dh = D // heads
    xs = x.data

    def split(m):
        return m.reshape(L, heads, dh).transpose(1, 0, 2)

    q = split(xs @ wq.data + bq.data)
    k = split(xs @ wk.data + bk.data)
    v = split(xs @ wv.data + bv.data)
    scores = (q @ _swap(k)).astype(np.float64) / math.sqrt(dh)
    if causal:
        mask = np.tril(np.ones((L, L), dtype=bool))
        scores = np.where(mask, scores, -np.inf)
    scores = scores - scores.max(axis=-1, keepdims=True)
    attn = np.exp(scores)
    attn /= attn.sum(axis=-1, keepdims=True)
    attn = attn.astype(xs.dtype)
    ctx_h = attn @ v
    ctx = ctx_h.transpose(1, 0, 2).reshape(L, D)
    out = ctx @ wo.data + bo.data

    def backward(g):
        g_wo = ctx.T @ g
        g_bo = g.sum(axis=0)
        g_ctx = split(g @ wo.data.T)
        g_attn = g_ctx @ _swap(v)
        g_v = _swap(attn) @ g_ctx
        g_scores = attn * (g_attn - (g_attn * attn).sum(axis=-1, keepdims=True))
        g_scores = g_scores / math.sqrt(dh)
        g_q = g_scores @ k
        g_k = _swap(g_scores) @ q

        def merge(m):
            return m.transpose(1, 0, 2).reshape(L, D)

        g_q, g_k, g_v = merge(g_q), merge(g_k), merge(g_v)
        g_x = g_q @ wq.data.T + g_k @ wk.data.T + g_v @ wv.data.T
        return (
            g_x,
            xs.T @ g_q,
            g_q.sum(axis=0),
            xs.T @ g_k,
            g_k.sum(axis=0),
            xs.T @ g_v,
            g_v.sum(axis=0),
            g_wo,
            g_bo,
        )

    return record("multi_head_attention", (x, wq, bq, wk, bk, wv, bv, wo, bo), out, backward)


@primitive("lstm_cell")
def lstm_cell(x: Tensor, state: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """One LSTM step.  ``state`` packs ``[h; c]`` on its last axis and the
    result uses the same packing.  ``weight`` is ``(I + H, 4H)`` with gate
    blocks ordered input, forget, cell, output.
    """
    H = state.shape[-1] // 2
    I = x.shape[-1]
    if weight.shape != (I + H, 4 * H) or bias.shape != (4 * H,) or x.shape[:-1] != state.shape[:-1]:
        raise ShapeError(f"lstm_cell: incompatible shapes {_shapes(x, state, weight, bias)}")
    h, c = state.data[..., :H], state.data[..., H:]
    xh = np.concatenate([x.data, h], axis=-1)
    z = xh @ weight.data + bias.data

    def sig(v):
        return 0.5 * (1.0 + np.tanh(0.5 * v))

    i, f, gg, o = sig(z[..., :H]), sig(z[..., H : 2 * H]), np.tanh(z[..., 2 * H : 3 * H]), sig(z[..., 3 * H :])
    c_new = f * c + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc
    out = np.concatenate([h_new, c_new], axis=-1)
    w = weight.data

    def backward(g):
        gh, gc = g[..., :H], g[..., H:]
        gc_tot = gc + gh * o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                gc_tot * gg * i * (1.0 - i),
                gc_tot * c * f * (1.0 - f),
                gc_tot * i * (1.0 - gg * gg),
                gh * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        g_w = xh.reshape(-1, I + H).T @ dz.reshape(-1, 4 * H)
        g_b = dz.reshape(-1, 4 * H).sum(axis=0)
        g_xh = dz @ w.T
        g_state = np.concatenate([g_xh[..., I:], gc_tot * f], axis=-1)
        return g_xh[..., :I], g_state, g_w, g_b

    return record("lstm_cell", (x, state, weight, bias), out, backward)
