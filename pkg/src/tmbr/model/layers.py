"""Layer building blocks.

Each layer has a tape-level forward over whole sequences built from the
autodiff primitives, and the two causal layers additionally have a
single-step numpy path with caches for incremental decoding.
"""

from __future__ import annotations

import math

import numpy as np

from ..autodiff import Tensor, ops
from .config import CausalConvLayer, TDNNLayer, TransformerLayer
from .params import ParamFactory, ModelParams

LN_EPS = 1e-5


# ------------------------------------------------------------------- params


def init_tdnn(f: ParamFactory, prefix: str, layer: TDNNLayer, in_dim: int) -> None:
    f.weight(f"{prefix}.weight", len(layer.context) * in_dim, layer.dim)
    f.bias(f"{prefix}.bias", layer.dim)


def init_causal_conv(f: ParamFactory, prefix: str, layer: CausalConvLayer) -> None:
    f.weight(f"{prefix}.weight", layer.kernel * layer.in_dim, layer.out_dim)
    f.bias(f"{prefix}.bias", layer.out_dim)


def init_transformer(f: ParamFactory, prefix: str, layer: TransformerLayer) -> None:
    d = layer.d_model
    f.ones(f"{prefix}.ln1.gamma", d)
    f.bias(f"{prefix}.ln1.beta", d)
    for name in ("q", "k", "v", "o"):
        f.weight(f"{prefix}.attn.w{name}", d, d)
        f.bias(f"{prefix}.attn.b{name}", d)
    f.ones(f"{prefix}.ln2.gamma", d)
    f.bias(f"{prefix}.ln2.beta", d)
    f.weight(f"{prefix}.ff.w1", d, layer.d_ff)
    f.bias(f"{prefix}.ff.b1", layer.d_ff)
    f.weight(f"{prefix}.ff.w2", layer.d_ff, d)
    f.bias(f"{prefix}.ff.b2", d)


# ------------------------------------------------------------- tape forward


def tdnn_forward(p: ModelParams, prefix: str, layer: TDNNLayer, x: Tensor) -> Tensor:
    y = ops.conv1d_context(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"], offsets=layer.context, stride=layer.stride)
    return ops.relu(y)


def causal_conv_forward(p: ModelParams, prefix: str, layer: CausalConvLayer, x: Tensor) -> Tensor:
    y = ops.conv1d_causal(x, p[f"{prefix}.weight"], p[f"{prefix}.bias"], kernel=layer.kernel)
    return ops.relu(y)


def transformer_forward(
    p: ModelParams,
    prefix: str,
    layer: TransformerLayer,
    x: Tensor,
    causal: bool,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm block: x + Drop(MHA(LN(x))), then y + Drop(FF(LN(y)))."""
    h = ops.layer_norm(x, p[f"{prefix}.ln1.gamma"], p[f"{prefix}.ln1.beta"], eps=LN_EPS)
    a = ops.multi_head_attention(
        h,
        *(p[f"{prefix}.attn.{n}"] for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")),
        heads=layer.heads,
        causal=causal,
    )
    a = ops.dropout(a, layer.dropout, rng=rng, training=training)
    y = ops.add(x, a)
    h2 = ops.layer_norm(y, p[f"{prefix}.ln2.gamma"], p[f"{prefix}.ln2.beta"], eps=LN_EPS)
    ff = ops.relu(ops.add(ops.matmul(h2, p[f"{prefix}.ff.w1"]), p[f"{prefix}.ff.b1"]))
    ff = ops.add(ops.matmul(ff, p[f"{prefix}.ff.w2"]), p[f"{prefix}.ff.b2"])
    ff = ops.dropout(ff, layer.dropout, rng=rng, training=training)
    return ops.add(y, ff)


# ------------------------------------------------------- incremental numpy


def layer_norm_np(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    return ((x64 - mu) / np.sqrt(var + LN_EPS) * gamma + beta).astype(x.dtype)


def causal_conv_step(
    p: ModelParams, prefix: str, layer: CausalConvLayer, x: np.ndarray, cache: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """``cache`` holds the previous ``kernel - 1`` inputs, newest first."""
    window = np.concatenate([x[None, :], cache], axis=0) if layer.kernel > 1 else x[None, :]
    y = window.reshape(-1) @ p[f"{prefix}.weight"].data + p[f"{prefix}.bias"].data
    return np.maximum(y, 0).astype(x.dtype), window[: layer.kernel - 1]


def causal_conv_cache(layer: CausalConvLayer, dtype=np.float32) -> np.ndarray:
    return np.zeros((layer.kernel - 1, layer.in_dim), dtype=dtype)


def transformer_step(
    p: ModelParams, prefix: str, layer: TransformerLayer, x: np.ndarray, cache: tuple[np.ndarray, np.ndarray]
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """One new position of a causally masked block; ``cache`` = (keys, values)."""
    g = lambda n: p[f"{prefix}.{n}"].data  # noqa: E731
    d, heads = layer.d_model, layer.heads
    dh = d // heads
    h = layer_norm_np(x, g("ln1.gamma"), g("ln1.beta"))
    q = h @ g("attn.wq") + g("attn.bq")
    k = h @ g("attn.wk") + g("attn.bk")
    v = h @ g("attn.wv") + g("attn.bv")
    keys = np.concatenate([cache[0], k[None, :]], axis=0)
    values = np.concatenate([cache[1], v[None, :]], axis=0)
    qh = q.reshape(heads, dh)
    kh = keys.reshape(-1, heads, dh).transpose(1, 0, 2)
    vh = values.reshape(-1, heads, dh).transpose(1, 0, 2)
    scores = np.einsum("hd,hld->hl", qh, kh).astype(np.float64) / math.sqrt(dh)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w = (w / w.sum(axis=-1, keepdims=True)).astype(x.dtype)
    ctx = np.einsum("hl,hld->hd", w, vh).reshape(d)
    y = x + ctx @ g("attn.wo") + g("attn.bo")
    h2 = layer_norm_np(y, g("ln2.gamma"), g("ln2.beta"))
    ff = np.maximum(h2 @ g("ff.w1") + g("ff.b1"), 0) @ g("ff.w2") + g("ff.b2")
    return (y + ff).astype(x.dtype), (keys, values)


def transformer_cache(layer: TransformerLayer, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    empty = np.zeros((0, layer.d_model), dtype=dtype)
    return empty, empty
