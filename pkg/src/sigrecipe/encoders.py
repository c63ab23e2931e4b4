"""Toy ViT / text transformer pair with attention-pooling (MAP) heads."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .naflex import PatchBatch, PatchSequence, patch_resize_matrix, resize_posemb, stack_sequences
from .nn import Params, param
from .tensor import ShapeError, Tensor

# byte-level vocabulary
BOS, EOS, PAD, MASK = 256, 257, 258, 259
TEXT_VOCAB = 260


@dataclass
class VitConfig:
    patch_size: int = 4
    width: int = 64
    depth: int = 4
    heads: int = 4
    posemb_len: int = 64
    embed_dim: int = 64
    channels: int = 3

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("VitConfig: width must be divisible by heads")
        if math.isqrt(self.posemb_len) ** 2 != self.posemb_len:
            raise ValueError("VitConfig: posemb_len must be a perfect square")

    @property
    def posemb_grid(self) -> int:
        return math.isqrt(self.posemb_len)

    @property
    def image_size(self) -> int:
        return self.posemb_grid * self.patch_size


@dataclass
class TextConfig:
    vocab_size: int = TEXT_VOCAB
    max_len: int = 64
    width: int = 64
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64

    def __post_init__(self):
        if self.max_len < 1:
            raise ValueError("TextConfig: max_len must be >= 1")
        if self.width % self.heads:
            raise ValueError("TextConfig: width must be divisible by heads")


# ------------------------------------------------------------------ tokenizer

def tokenize(text: str, max_len: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Lowercase, byte-encode, wrap in BOS/EOS and pad to `max_len`."""
    body = list(text.lower().encode("utf-8"))[: max(0, max_len - 2)]
    ids = ([BOS] + body + [EOS])[:max_len]
    mask = np.zeros(max_len, dtype=np.float32)
    mask[: len(ids)] = 1
    out = np.full(max_len, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    return out, mask


def tokenize_batch(texts, max_len: int = 64) -> tuple[np.ndarray, np.ndarray]:
    pairs = [tokenize(t, max_len) for t in texts]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


def detokenize(ids) -> str:
    out = bytearray()
    for i in np.asarray(ids).tolist():
        if i == EOS or i == PAD:
            break
        if i < 256:
            out.append(i)
    return out.decode("utf-8", errors="replace")


# ---------------------------------------------------------------------- params

def _init_map_head(params: Params, rng, prefix: str, width: int) -> None:
    params[f"{prefix}.probe"] = param(rng.normal(0, 1 / math.sqrt(width), (1, 1, width)), f"{prefix}.probe")
    nn.init_cross_attention(params, rng, f"{prefix}.attn", width)
    nn.init_layer_norm(params, f"{prefix}.ln", width)
    nn.init_mlp(params, rng, f"{prefix}.mlp", width)


def init_image_params(cfg: VitConfig, rng: np.random.Generator, prefix: str = "img") -> Params:
    p, c, w = cfg.patch_size, cfg.channels, cfg.width
    params: Params = {}
    fan_in = p * p * c
    params[f"{prefix}.embedding.kernel"] = param(
        rng.normal(0, 1 / math.sqrt(fan_in), (p, p, c, w)), f"{prefix}.embedding.kernel")
    params[f"{prefix}.embedding.bias"] = param(np.zeros(w), f"{prefix}.embedding.bias")
    params[f"{prefix}.pos_embedding"] = param(
        rng.normal(0, 1 / math.sqrt(w), (cfg.posemb_len, w)), f"{prefix}.pos_embedding")
    for i in range(cfg.depth):
        nn.init_block(params, rng, f"{prefix}.block{i}", w)
    nn.init_layer_norm(params, f"{prefix}.ln_final", w)
    _init_map_head(params, rng, f"{prefix}.map", w)
    nn.init_dense(params, rng, f"{prefix}.head", w, cfg.embed_dim)
    return params


def init_text_params(cfg: TextConfig, rng: np.random.Generator, prefix: str = "txt") -> Params:
    w = cfg.width
    params: Params = {}
    params[f"{prefix}.token_embedding"] = param(rng.normal(0, 1 / math.sqrt(w), (cfg.vocab_size, w)),
                                                f"{prefix}.token_embedding")
    params[f"{prefix}.pos_embedding"] = param(rng.normal(0, 1 / math.sqrt(w), (cfg.max_len, w)),
                                              f"{prefix}.pos_embedding")
    for i in range(cfg.depth):
        nn.init_block(params, rng, f"{prefix}.block{i}", w)
    nn.init_layer_norm(params, f"{prefix}.ln_final", w)
    _init_map_head(params, rng, f"{prefix}.map", w)
    nn.init_dense(params, rng, f"{prefix}.head", w, cfg.embed_dim)
    return params


# --------------------------------------------------------------------- forward

def map_pool(x: Tensor, valid: np.ndarray | None, params: Params, prefix: str, heads: int) -> Tensor:
    """Attention pooling: one learned probe attends over the (valid) tokens."""
    b = x.shape[0]
    probe = params[f"{prefix}.probe"]
    q = probe if b == 1 else T.concat([probe] * b, axis=0)
    out = nn.cross_attention(q, x, params, f"{prefix}.attn", heads, valid)
    out = out + nn.mlp(nn.layer_norm(out, params, f"{prefix}.ln"), params, f"{prefix}.mlp")
    return out.reshape(b, x.shape[-1])


def _position_embeddings(params: Params, prefix: str, grids, seq_len: int) -> Tensor:
    posemb = params[f"{prefix}.pos_embedding"]
    width = posemb.shape[1]
    g0 = math.isqrt(posemb.shape[0])
    cache: dict = {}
    rows = []
    for grid in grids:
        if grid not in cache:
            if grid[0] * grid[1] > seq_len:
                raise ShapeError(f"grid {grid} does not fit sequence length {seq_len}")
            pe = posemb if grid == (g0, g0) else resize_posemb(posemb, grid)
            pad = seq_len - grid[0] * grid[1]
            if pad:
                pe = T.concat([pe, Tensor(np.zeros((pad, width), pe.dtype))], axis=0)
            cache[grid] = pe.reshape(1, seq_len, width)
        rows.append(cache[grid])
    return rows[0] if len(rows) == 1 else T.concat(rows, axis=0)


def patch_kernel(kernel: Tensor, patch_dim: int) -> Tensor:
    """[p*p*c, width] embedding matrix for patch vectors of length `patch_dim`.

    A different patch size gets the pseudo-inverse resized kernel, computed
    from the stored one so gradients flow back to it.
    """
    p, _, c, w = kernel.shape
    q = math.isqrt(patch_dim // c)
    if q * q * c != patch_dim:
        raise ShapeError(f"patch vectors of length {patch_dim} do not match {c} channels")
    if q == p:
        return kernel.reshape(p * p * c, w)
    m = np.linalg.pinv(patch_resize_matrix(p, q).T).astype(kernel.dtype)
    return (Tensor(m) @ kernel.reshape(p * p, c * w)).reshape(q * q * c, w)


def encode_image(params: Params, patches, cfg: VitConfig, prefix: str = "img",
                 mask_positions: np.ndarray | None = None, mask_token: Tensor | None = None,
                 ) -> tuple[Tensor, Tensor]:
    """Returns (l2-normalized pooled embedding [B, embed_dim], tokens [B, S, width]).

    `mask_positions` ([B, S] in {0,1}) replaces those patch embeddings by
    `mask_token` before position embeddings are added.
    """
    if isinstance(patches, PatchSequence):
        patches = stack_sequences([patches])
    batch: PatchBatch = patches
    kernel = params[f"{prefix}.embedding.kernel"]
    x = Tensor(batch.patches.astype(kernel.dtype, copy=False)) @ patch_kernel(kernel, batch.patches.shape[-1])
    seq_len = batch.patches.shape[1]
    x = x + params[f"{prefix}.embedding.bias"]
    if mask_positions is not None:
        m = np.asarray(mask_positions, dtype=x.dtype)[..., None]
        x = x * Tensor(1.0 - m) + mask_token * Tensor(m)
    x = x + _position_embeddings(params, prefix, batch.grids, seq_len)
    valid = None if batch.mask.all() else batch.mask
    heads = cfg.heads
    for i in range(cfg.depth):
        x = nn.block(x, params, f"{prefix}.block{i}", heads, key_valid=valid)
    tokens = nn.layer_norm(x, params, f"{prefix}.ln_final")
    pooled = map_pool(tokens, valid, params, f"{prefix}.map", heads)
    emb = nn.dense(pooled, params, f"{prefix}.head")
    return T.l2_normalize(emb, -1), tokens


def encode_text(params: Params, ids: np.ndarray, mask: np.ndarray, cfg: TextConfig,
                prefix: str = "txt") -> Tensor:
    """l2-normalized text embeddings [B, embed_dim] for padded id batches."""
    ids = np.atleast_2d(ids)
    mask = np.atleast_2d(mask)
    if ids.shape[1] > cfg.max_len:
        raise ShapeError(f"text length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    # trailing all-padding columns cannot affect the result; drop them
    used = int(np.flatnonzero(mask.any(0)).max()) + 1 if mask.any() else 1
    ids, mask = ids[:, :used], mask[:, :used]
    b, n = ids.shape
    x = T.gather(params[f"{prefix}.token_embedding"], ids, axis=0)
    x = x + params[f"{prefix}.pos_embedding"][:n]
    valid = None if mask.all() else mask
    for i in range(cfg.depth):
        x = nn.block(x, params, f"{prefix}.block{i}", cfg.heads, key_valid=valid)
    x = nn.layer_norm(x, params, f"{prefix}.ln_final")
    pooled = map_pool(x, valid, params, f"{prefix}.map", cfg.heads)
    return T.l2_normalize(nn.dense(pooled, params, f"{prefix}.head"), -1)


def encoder_names(params: Params) -> set[str]:
    return {k for k in params if k.startswith(("img.", "txt.", "sigmoid."))}
