"""Cross-attention decoder for captioning, referring expressions and grounded captioning."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .encoders import EOS, MASK, PAD, TEXT_VOCAB
from .nn import Params, param
from .tensor import Tensor

N_BINS = 1000
COORD_BASE = TEXT_VOCAB
TASK_CAPTION = COORD_BASE + N_BINS
TASK_REFER = TASK_CAPTION + 1
TASK_GROUND = TASK_CAPTION + 2
DECODER_VOCAB = TASK_GROUND + 1


@dataclass
class DecoderConfig:
    width: int = 64
    depth: int = 2
    heads: int = 4
    max_len: int = 72
    vocab: int = DECODER_VOCAB
    n_chunks: int = 4
    average_targets: bool = True
    sample_tasks: bool = False        # one drawn task per example instead of three passes

    @classmethod
    def for_text(cls, text_cfg, **kw) -> "DecoderConfig":
        return cls(width=text_cfg.width, depth=math.ceil(text_cfg.depth / 2), heads=text_cfg.heads, **kw)


Box = tuple[float, float, float, float]


@dataclass
class DecoderTargets:
    caption: list[int]
    regions: list[tuple[Box, list[int]]] = field(default_factory=list)
    class_regions: list[tuple[Box, list[int]]] = field(default_factory=list)

    def __post_init__(self):
        if not self.caption:
            raise ValueError("DecoderTargets: empty caption")
        for box, _ in self.regions + self.class_regions:
            check_box(box)

    @classmethod
    def from_example(cls, ex) -> "DecoderTargets":
        enc = lambda s: list(s.lower().encode("utf-8"))
        return cls(enc(ex.caption), [(b, enc(t)) for b, t in ex.regions],
                   [(b, enc(t)) for b, t in ex.class_regions])


def check_box(box: Box) -> None:
    x0, y0, x1, y1 = box
    if not all(0.0 <= c <= 1.0 for c in box):
        raise ValueError(f"box {box} outside [0, 1]")
    if not (x0 < x1 and y0 < y1):
        raise ValueError(f"box {box} is not ordered")


def quantize(c: float) -> int:
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"coordinate {c} outside [0, 1]")
    return min(int(math.floor(c * N_BINS)), N_BINS - 1)


def dequantize(b: int) -> float:
    return (b + 0.5) / N_BINS


def quantize_box(box: Box) -> list[int]:
    """(x0, y0, x1, y1) -> 4 coordinate tokens in (y0, x0, y1, x1) order."""
    x0, y0, x1, y1 = box
    return [COORD_BASE + quantize(c) for c in (y0, x0, y1, x1)]


def dequantize_box(tokens) -> Box:
    y0, x0, y1, x1 = (dequantize(int(t) - COORD_BASE) for t in tokens)
    return x0, y0, x1, y1


def sample_parallel_mode(rng: np.random.Generator, prob: float = 0.5) -> bool:
    return bool(rng.random() < prob)


# -------------------------------------------------------------------- params

def init_decoder_params(cfg: DecoderConfig, image_width: int, rng) -> Params:
    w = cfg.width
    params: Params = {}
    params["decoder.token_embedding"] = param(rng.normal(0, 1 / math.sqrt(w), (cfg.vocab, w)),
                                              "decoder.token_embedding")
    params["decoder.pos_embedding"] = param(rng.normal(0, 1 / math.sqrt(w), (cfg.max_len, w)),
                                            "decoder.pos_embedding")
    for i in range(cfg.depth):
        nn.init_block(params, rng, f"decoder.block{i}", w, cross=True, kv_width=image_width)
    nn.init_layer_norm(params, "decoder.ln_final", w)
    params["decoder.head.kernel"] = param(np.zeros((w, cfg.vocab)), "decoder.head.kernel")
    params["decoder.head.bias"] = param(np.zeros(cfg.vocab), "decoder.head.bias")
    return params


# ---------------------------------------------------------------- chunked CE

@dataclass
class VocabProjection:
    """Produces logits for a vocabulary slice from hidden states and a linear head."""
    hidden: Tensor      # [N, W]
    kernel: Tensor      # [W, V]
    bias: Tensor        # [V]

    @property
    def vocab(self) -> int:
        return self.kernel.shape[1]

    def logits(self, lo: int, hi: int) -> np.ndarray:
        return self.hidden.data @ self.kernel.data[:, lo:hi] + self.bias.data[lo:hi]


def chunked_ce(producer: VocabProjection, targets, n_chunks: int, weights=None) -> Tensor:
    """sum_i w_i * CE(softmax(logits_i), target_i), materializing one vocab chunk at a time.

    Forward runs an online log-sum-exp over chunks; backward recomputes each
    chunk's logits rather than keeping them.
    """
    if n_chunks < 1:
        raise ValueError("chunked_ce: n_chunks must be >= 1")
    tgt = np.asarray(targets).reshape(-1)
    h, K, bvec = producer.hidden, producer.kernel, producer.bias
    n, V = h.shape[0], producer.vocab
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    w = w.astype(h.dtype)
    bounds = np.linspace(0, V, min(n_chunks, V) + 1).round().astype(int)
    chunks = [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    # per-row accumulators are f64; only one chunk of logits is ever live
    run_max = np.full(n, -np.inf)
    run_sum = np.zeros(n)
    tgt_logit = np.zeros(n)
    for lo, hi in chunks:
        z = producer.logits(lo, hi).astype(np.float64)
        m = np.maximum(run_max, z.max(1))
        run_sum = run_sum * np.exp(run_max - m) + np.exp(z - m[:, None]).sum(1)
        run_max = m
        inside = (tgt >= lo) & (tgt < hi)
        tgt_logit[inside] = z[inside, tgt[inside] - lo]
    lse = run_max + np.log(run_sum)
    loss = np.asarray((w.astype(np.float64) * (lse - tgt_logit)).sum(), dtype=h.dtype)

    def backward(g):
        dh = np.zeros_like(h.data)
        dK = np.zeros_like(K.data)
        db = np.zeros_like(bvec.data)
        scale = (g * w)[:, None]
        for lo, hi in chunks:
            z = producer.logits(lo, hi)
            d = np.exp(z - lse[:, None]).astype(h.dtype)
            inside = np.flatnonzero((tgt >= lo) & (tgt < hi))
            d[inside, tgt[inside] - lo] -= 1.0
            d *= scale
            dh += d @ K.data[:, lo:hi].T
            dK[:, lo:hi] = h.data.T @ d
            db[lo:hi] = d.sum(0)
        return dh, dK, db

    return T._make(loss, (h, K, bvec), backward, "chunked_ce")


def softmax_ce(logits: Tensor, targets, weights=None) -> Tensor:
    """Unchunked reference: sum_i w_i * -log softmax(logits_i)[target_i]."""
    tgt = np.asarray(targets).reshape(-1, 1)
    n = tgt.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights).reshape(-1)
    logp = T.take_along(T.log_softmax(logits, -1), tgt, axis=-1).reshape(n)
    return -T.sum_(logp * Tensor(w.astype(logits.dtype)))


# ------------------------------------------------------------------- forward

def decode_hidden(params: Params, image_tokens: Tensor, input_embeds: Tensor, valid: np.ndarray | None,
                  causal, cfg: DecoderConfig, image_valid: np.ndarray | None = None) -> Tensor:
    """Decoder hidden states [B, L, W] for already-embedded inputs.

    `causal` is a bool, or one bool per row for mixed batches.
    """
    L = input_embeds.shape[1]
    x = input_embeds + params["decoder.pos_embedding"][:L]
    for i in range(cfg.depth):
        x = nn.block(x, params, f"decoder.block{i}", cfg.heads, key_valid=valid, causal=causal,
                     memory=image_tokens, memory_valid=image_valid)
    return nn.layer_norm(x, params, "decoder.ln_final")


def decode_logits(params: Params, image_tokens: Tensor, input_ids: np.ndarray, causal: bool,
                  cfg: DecoderConfig, valid=None, image_valid=None) -> Tensor:
    emb = T.gather(params["decoder.token_embedding"], input_ids, axis=0)
    h = decode_hidden(params, image_tokens, emb, valid, causal, cfg, image_valid)
    return nn.dense(h, params, "decoder.head")


def _pad(seqs: list[list[int]], value: int) -> np.ndarray:
    L = max(len(s) for s in seqs)
    out = np.full((len(seqs), L), value, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


TASKS = ("caption", "refer", "ground")


def _task_sequence(t: DecoderTargets, kind: str, parallel: bool, rng, max_len: int):
    """(inputs, outputs, scored output positions) for one example and task."""
    if kind == "caption":
        cap = t.caption[: max_len - 1]
        full = [TASK_CAPTION] + cap + [EOS]
        inp = [TASK_CAPTION] + ([MASK] * len(cap) if parallel else cap)
        return inp, full[1:], list(range(len(cap) + 1))
    pool = t.regions + t.class_regions
    if not pool:
        raise ValueError(f"{kind} target needs at least one region")
    box, text = pool[int(rng.integers(len(pool)))]
    coords = quantize_box(box)
    if kind == "refer":
        text = text[: max_len - 5]
        full = [TASK_REFER] + text + coords
        scored = list(range(len(text), len(text) + 4))
    elif kind == "ground":
        text = text[: max_len - 6]
        full = [TASK_GROUND] + coords + text + [EOS]
        scored = list(range(4, len(full) - 1))
    else:
        raise ValueError(f"unknown decoder target {kind!r}")
    return full[:-1], full[1:], scored


def build_sequences(targets: list[DecoderTargets], kind, parallel: bool, rng, max_len: int):
    """Teacher-forcing inputs, targets, per-token loss weights and valid mask.

    `kind` is one task name or one per example. Loss weights are normalized
    so each example contributes 1/B. Also returns which rows decode causally
    (all but parallel-mode captions).
    """
    kinds = [kind] * len(targets) if isinstance(kind, str) else list(kind)
    if len(kinds) != len(targets):
        raise ValueError("build_sequences: one task per example expected")
    inputs, outputs, weights, causal = [], [], [], []
    for t, k in zip(targets, kinds):
        par = parallel and k == "caption"
        inp, out, scored = _task_sequence(t, k, par, rng, max_len)
        wt = np.zeros(len(out))
        wt[scored] = 1.0 / len(scored)
        inputs.append(inp)
        outputs.append(out)
        weights.append(wt)
        causal.append(not par)
    x = _pad(inputs, PAD)
    y = _pad(outputs, PAD)
    w = np.zeros(y.shape)
    for i, wt in enumerate(weights):
        w[i, : len(wt)] = wt
    valid = (x != PAD).astype(np.float32)
    return x, y, w / len(targets), valid, np.array(causal)


def target_loss(params: Params, image_tokens: Tensor, targets: list[DecoderTargets], kind,
                parallel: bool, cfg: DecoderConfig, rng, image_valid=None) -> Tensor:
    x, y, w, valid, causal = build_sequences(targets, kind, parallel, rng, cfg.max_len)
    causal = bool(causal[0]) if causal.all() or not causal.any() else causal
    emb = T.gather(params["decoder.token_embedding"], x, axis=0)
    h = decode_hidden(params, image_tokens, emb, None if valid.all() else valid, causal, cfg, image_valid)
    keep = np.flatnonzero(w.reshape(-1) > 0)
    hs = h.reshape(-1, h.shape[-1])[keep]
    proj = VocabProjection(hs, params["decoder.head.kernel"], params["decoder.head.bias"])
    return chunked_ce(proj, y.reshape(-1)[keep], cfg.n_chunks, w.reshape(-1)[keep])


def decode_loss(params: Params, image_tokens: Tensor, targets: list[DecoderTargets], parallel: bool,
                cfg: DecoderConfig, rng: np.random.Generator, image_valid=None,
                return_parts: bool = False):
    """Captioning, referring and grounded-captioning losses.

    With `cfg.sample_tasks` each example trains one uniformly drawn task in
    a single decoder pass; otherwise every example runs all three.
    """
    if cfg.sample_tasks:
        kinds = [TASKS[int(i)] for i in rng.integers(len(TASKS), size=len(targets))]
        total = target_loss(params, image_tokens, targets, kinds, parallel, cfg, rng, image_valid)
        return (total, {"sampled": total}) if return_parts else total
    parts = {k: target_loss(params, image_tokens, targets, k, parallel, cfg, rng, image_valid)
             for k in TASKS}
    total = parts["caption"] + parts["refer"] + parts["ground"]
    if cfg.average_targets:
        total = total * (1.0 / 3)
    return (total, parts) if return_parts else total
