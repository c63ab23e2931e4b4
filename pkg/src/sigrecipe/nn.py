"""Transformer building blocks over a flat ``{name: Tensor}`` parameter dict."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict[str, Tensor]


def param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


def init_dense(params: Params, rng: np.random.Generator, prefix: str, d_in: int, d_out: int,
               bias: bool = True, scale: float = 1.0) -> None:
    limit = scale * math.sqrt(6.0 / (d_in + d_out))
    params[f"{prefix}.kernel"] = param(rng.uniform(-limit, limit, (d_in, d_out)), f"{prefix}.kernel")
    if bias:
        params[f"{prefix}.bias"] = param(np.zeros(d_out), f"{prefix}.bias")


def init_layer_norm(params: Params, prefix: str, width: int) -> None:
    params[f"{prefix}.scale"] = param(np.ones(width), f"{prefix}.scale")
    params[f"{prefix}.bias"] = param(np.zeros(width), f"{prefix}.bias")


def init_mlp(params: Params, rng, prefix: str, width: int, ratio: int = 4) -> None:
    init_dense(params, rng, f"{prefix}.fc1", width, width * ratio)
    init_dense(params, rng, f"{prefix}.fc2", width * ratio, width)


def init_self_attention(params: Params, rng, prefix: str, width: int) -> None:
    init_dense(params, rng, f"{prefix}.qkv", width, 3 * width)
    init_dense(params, rng, f"{prefix}.out", width, width)


def init_cross_attention(params: Params, rng, prefix: str, width: int, kv_width: int | None = None) -> None:
    init_dense(params, rng, f"{prefix}.q", width, width)
    init_dense(params, rng, f"{prefix}.kv", kv_width or width, 2 * width)
    init_dense(params, rng, f"{prefix}.out", width, width)


def init_block(params: Params, rng, prefix: str, width: int, cross: bool = False,
               kv_width: int | None = None) -> None:
    init_layer_norm(params, f"{prefix}.ln1", width)
    init_self_attention(params, rng, f"{prefix}.attn", width)
    if cross:
        init_layer_norm(params, f"{prefix}.ln_x", width)
        init_cross_attention(params, rng, f"{prefix}.xattn", width, kv_width)
    init_layer_norm(params, f"{prefix}.ln2", width)
    init_mlp(params, rng, f"{prefix}.mlp", width)


def dense(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.linear(x, params[f"{prefix}.kernel"], params.get(f"{prefix}.bias"))


def layer_norm(x: Tensor, params: Params, prefix: str) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.scale"], params[f"{prefix}.bias"])


def mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    return dense(T.gelu(dense(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def fill_mask(key_valid: np.ndarray | None, n_q: int, n_k: int, causal=False) -> np.ndarray | None:
    """{0,1} array broadcastable to [B, H, Lq, Lk]; 1 marks logits to suppress.

    `causal` may be a per-row boolean array.
    """
    fill = None
    if key_valid is not None:
        fill = (np.asarray(key_valid) == 0)[:, None, None, :]
    rows = np.asarray(causal, dtype=bool)
    if rows.any():
        tri = np.triu(np.ones((n_q, n_k), dtype=bool), 1)[None, None]
        if rows.ndim:
            tri = tri & rows[:, None, None, None]
        fill = tri if fill is None else (fill | tri)
    return None if fill is None else fill.astype(np.float32)


def self_attention(x: Tensor, params: Params, prefix: str, heads: int,
                   key_valid=None, causal=False) -> Tensor:
    w = x.shape[-1]
    qkv = dense(x, params, f"{prefix}.qkv")
    q, k, v = qkv[..., :w], qkv[..., w:2 * w], qkv[..., 2 * w:]
    fill = fill_mask(key_valid, x.shape[1], x.shape[1], causal)
    return dense(T.attention(q, k, v, heads, fill), params, f"{prefix}.out")


def cross_attention(x: Tensor, mem: Tensor, params: Params, prefix: str, heads: int,
                    mem_valid=None) -> Tensor:
    w = x.shape[-1]
    q = dense(x, params, f"{prefix}.q")
    kv = dense(mem, params, f"{prefix}.kv")
    fill = fill_mask(mem_valid, x.shape[1], mem.shape[1])
    return dense(T.attention(q, kv[..., :w], kv[..., w:], heads, fill), params, f"{prefix}.out")


def block(x: Tensor, params: Params, prefix: str, heads: int, key_valid=None, causal=False,
          memory: Tensor | None = None, memory_valid=None) -> Tensor:
    """Pre-LN transformer block, optionally with a cross-attention sublayer."""
    x = x + self_attention(layer_norm(x, params, f"{prefix}.ln1"), params, f"{prefix}.attn",
                           heads, key_valid, causal)
    if memory is not None:
        x = x + cross_attention(layer_norm(x, params, f"{prefix}.ln_x"), memory, params,
                                f"{prefix}.xattn", heads, memory_valid)
    return x + mlp(layer_norm(x, params, f"{prefix}.ln2"), params, f"{prefix}.mlp")
