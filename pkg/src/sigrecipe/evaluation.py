"""Retrieval, zero-shot classification and a frozen-feature referring probe."""
from __future__ import annotations

import numpy as np

from .data import EvalSets


def _hits(sim: np.ndarray, k: int) -> np.ndarray:
    """Per row: does the diagonal entry rank within the top k? Ties go to the lower column."""
    n = sim.shape[0]
    diag = np.diag(sim)[:, None]
    cols = np.arange(sim.shape[1])[None, :]
    ahead = (sim > diag) | ((sim == diag) & (cols < np.arange(n)[:, None]))
    return ahead.sum(1) < k


def retrieval_recall(img_embs: np.ndarray, txt_embs: np.ndarray, k: int = 1) -> dict[str, float]:
    """recall@k for image->text and text->image over row-aligned pairs."""
    img_embs, txt_embs = np.asarray(img_embs, np.float64), np.asarray(txt_embs, np.float64)
    if img_embs.shape != txt_embs.shape:
        raise ValueError(f"retrieval_recall: shapes {img_embs.shape} and {txt_embs.shape} differ")
    n = img_embs.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"retrieval_recall: k={k} outside 1..{n}")
    sim = img_embs @ txt_embs.T
    return {"i2t": float(_hits(sim, k).mean()), "t2i": float(_hits(sim.T, k).mean())}


def zero_shot_acc(img_embs: np.ndarray, class_embs: np.ndarray, labels) -> float:
    class_embs = np.atleast_2d(class_embs)
    if class_embs.shape[0] == 0:
        raise ValueError("zero_shot_acc: empty class set")
    pred = np.argmax(np.asarray(img_embs) @ class_embs.T, axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def evaluate(params, cfg, sets: EvalSets, seq_len: int | None = None, side: int | None = None,
             patch_size: int | None = None) -> dict[str, float]:
    """Retrieval and zero-shot numbers for one parameter set."""
    from .model import embed_images, embed_texts

    kw = dict(seq_len=seq_len, side=side, patch_size=patch_size)
    zi = embed_images(params, cfg, [e.image for e in sets.retrieval], **kw)
    zt = embed_texts(params, cfg, [e.caption_en for e in sets.retrieval])
    rec = retrieval_recall(zi, zt, 1)
    zs_img = embed_images(params, cfg, [e.image for e in sets.zero_shot], **kw)
    zs_cls = embed_texts(params, cfg, sets.class_prompts)
    acc = zero_shot_acc(zs_img, zs_cls, [e.class_id for e in sets.zero_shot])
    return {"recall_i2t": rec["i2t"], "recall_t2i": rec["t2i"],
            "recall_at_1": 0.5 * (rec["i2t"] + rec["t2i"]), "zero_shot_acc": acc}


def box_iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def predict_boxes(dec_params, image_tokens, texts, dcfg) -> list:
    """Greedy decoding of four coordinate tokens after a referring prompt."""
    from . import decoder as D
    from .tensor import Tensor

    prompts = [[D.TASK_REFER] + list(t.lower().encode("utf-8"))[: dcfg.max_len - 5] for t in texts]
    boxes = []
    mem = Tensor(np.asarray(image_tokens))
    for i, prompt in enumerate(prompts):
        seq = list(prompt)
        for _ in range(4):
            logits = D.decode_logits(dec_params, mem[i:i + 1], np.array([seq]), True, dcfg).data[0, -1]
            coord = logits[D.COORD_BASE:D.COORD_BASE + D.N_BINS]
            seq.append(D.COORD_BASE + int(np.argmax(coord)))
        x0, y0, x1, y1 = D.dequantize_box(seq[-4:])
        boxes.append((min(x0, x1), min(y0, y1), max(x0, x1), max(y0, y1)))
    return boxes


def referring_probe(params, cfg, sets: EvalSets, steps: int = 200, batch_size: int = 32, lr: float = 1e-3,
                    seed: int = 0, depth: int = 2, n_eval: int | None = None) -> dict[str, float]:
    """Train a small decoder on frozen, un-pooled image features; report box accuracy at IoU 0.5."""
    from dataclasses import replace

    from . import decoder as D
    from . import encoders as E
    from .data import generate
    from .model import image_batch
    from .tensor import Tape, Tensor
    from .trainer import AdamState, TrainPlan, adam_step

    rng = np.random.default_rng(seed)
    dcfg = replace(cfg.decoder, depth=depth)
    dec = D.init_decoder_params(dcfg, cfg.vit.width, rng)
    opt = AdamState()
    plan = TrainPlan(total_steps=max(steps, 20), warmup_steps=0)
    stream = generate(seed + 99, steps * batch_size, mix=1.0, noise=0.0, n_shapes=None)
    for _ in range(steps):
        exs = [next(stream) for _ in range(batch_size)]
        _, tok = E.encode_image(params, image_batch([e.image for e in exs], cfg), cfg.vit)
        enc = lambda s: list(s.lower().encode("utf-8"))
        targets = [D.DecoderTargets(enc(e.caption), [(b, enc(t)) for b, t in e.regions]) for e in exs]
        with Tape() as tape:
            loss = D.target_loss(dec, Tensor(tok.data), targets, "refer", False, dcfg, rng)
        adam_step(dec, tape.backward(loss, dec), opt, plan, lr, weight_decay=0.0)
    items = sets.referring[:n_eval] if n_eval else sets.referring
    _, tok = E.encode_image(params, image_batch([ex.image for ex, _, _ in items], cfg), cfg.vit)
    pred = predict_boxes(dec, tok.data, [t for _, t, _ in items], dcfg)
    hits = [box_iou(p, box) >= 0.5 for p, (_, _, box) in zip(pred, items)]
    return {"referring_acc": float(np.mean(hits))}
