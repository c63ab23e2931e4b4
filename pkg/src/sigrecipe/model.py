"""Model bundle: configs, parameter init and batched (tape-free) embedding."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import decoder as D
from . import encoders as E
from . import losses as L
from . import naflex
from .nn import Params
from .tensor import Tensor


@dataclass
class ModelConfig:
    vit: E.VitConfig = field(default_factory=E.VitConfig)
    text: E.TextConfig = field(default_factory=E.TextConfig)
    decoder: D.DecoderConfig | None = None
    distill: L.DistillConfig = field(default_factory=L.DistillConfig)
    sigmoid: L.SigmoidLossParams = field(default_factory=L.SigmoidLossParams)

    def __post_init__(self):
        if self.decoder is None:
            self.decoder = D.DecoderConfig.for_text(self.text)
        if self.vit.embed_dim != self.text.embed_dim:
            raise ValueError("image and text towers must share embed_dim")

    @property
    def image_side(self) -> int:
        return self.vit.image_size


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """Encoders, sigmoid-loss scalars and decoder. Distillation heads are added later."""
    params: Params = {}
    params.update(E.init_image_params(cfg.vit, rng))
    params.update(E.init_text_params(cfg.text, rng))
    params.update(L.init_sigmoid_params(cfg.sigmoid))
    params.update(D.init_decoder_params(cfg.decoder, cfg.vit.width, rng))
    return params


def init_distill(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    return L.init_distill_params(cfg.distill, cfg.vit.width, cfg.vit.embed_dim, rng)


def as_tensors(arrays: dict[str, np.ndarray]) -> Params:
    return {k: Tensor(np.asarray(v), requires_grad=True, name=k) for k, v in arrays.items()}


def image_batch(images, cfg: ModelConfig, seq_len: int | None = None, side: int | None = None,
                patch_size: int | None = None) -> naflex.PatchBatch:
    """Fixed square resolution by default; aspect-preserving when `seq_len` is given."""
    p = patch_size or cfg.vit.patch_size
    if seq_len is not None:
        seqs = [naflex.preprocess(im, p, seq_len) for im in images]
    else:
        seqs = [naflex.preprocess_square(im, p, side or cfg.image_side) for im in images]
    return naflex.stack_sequences(seqs)


def embed_images(params: Params, cfg: ModelConfig, images, batch_size: int = 128, **kw) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch_size):
        emb, _ = E.encode_image(params, image_batch(images[i:i + batch_size], cfg, **kw), cfg.vit)
        out.append(emb.data)
    return np.concatenate(out)


def embed_texts(params: Params, cfg: ModelConfig, texts, batch_size: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(texts), batch_size):
        ids, mask = E.tokenize_batch(texts[i:i + batch_size], cfg.text.max_len)
        out.append(E.encode_text(params, ids, mask, cfg.text).data)
    return np.concatenate(out)
