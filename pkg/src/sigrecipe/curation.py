"""Learnability-based active data curation: scoring, joint batch selection, teacher fine-tune."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import encoders as E
from . import losses as L
from .data import generate
from .model import ModelConfig, embed_images, embed_texts
from .nn import Params
from .tensor import NonFiniteError, Tensor


@dataclass
class CurationConfig:
    filter_ratio: float = 0.5
    batch_size: int = 32
    n_chunks: int = 4

    def __post_init__(self):
        if not 0.0 <= self.filter_ratio < 1.0:
            raise ValueError("filter_ratio must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.n_chunks < 1:
            raise ValueError("n_chunks must be >= 1")

    @property
    def super_batch(self) -> int:
        return int(round(self.batch_size / (1.0 - self.filter_ratio)))


@dataclass
class ScoredExample:
    example_id: object
    learner_loss: float
    teacher_loss: float

    def __post_init__(self):
        if not (math.isfinite(self.learner_loss) and math.isfinite(self.teacher_loss)):
            raise NonFiniteError(f"non-finite loss for example {self.example_id!r}")

    @property
    def learnability(self) -> float:
        return self.learner_loss - self.teacher_loss


@dataclass
class ScoredBatch:
    examples: list[ScoredExample]
    # learner minus teacher per-pair sigmoid terms; entry (i, j) pairs image i with text j
    pair: np.ndarray

    def __len__(self):
        return len(self.examples)

    @property
    def ids(self) -> list:
        return [e.example_id for e in self.examples]

    @property
    def learnability(self) -> np.ndarray:
        return np.array([e.learnability for e in self.examples])


def per_example_loss(pair: np.ndarray) -> np.ndarray:
    """Diagonal term plus the mean of the example's off-diagonal row and column terms."""
    n = pair.shape[0]
    diag = np.diag(pair)
    if n == 1:
        return diag.copy()
    off = pair.sum(1) + pair.sum(0) - 2 * diag
    return diag + off / (2 * (n - 1))


def score_embeddings(ids, learner: tuple[np.ndarray, np.ndarray, float, float],
                     teacher: tuple[np.ndarray, np.ndarray, float, float]) -> ScoredBatch:
    """Score from (image_embs, text_embs, t_prime, b) of both models over one super-batch."""
    pl = L.pair_loss_matrix(*learner)
    pt = L.pair_loss_matrix(*teacher)
    if not (np.isfinite(pl).all() and np.isfinite(pt).all()):
        raise NonFiniteError("score_learnability: non-finite pair loss")
    ll, tl = per_example_loss(pl), per_example_loss(pt)
    examples = [ScoredExample(i, float(a), float(b)) for i, a, b in zip(ids, ll, tl)]
    return ScoredBatch(examples, pl - pt)


def _model_view(params: Params, cfg: ModelConfig, examples, **mode):
    zi = embed_images(params, cfg, [e.image for e in examples], **mode).astype(np.float64)
    zt = embed_texts(params, cfg, [e.caption for e in examples]).astype(np.float64)
    return zi, zt, float(params["sigmoid.t_prime"].item()), float(params["sigmoid.b"].item())


def score_learnability(learner_params: Params, teacher_params: Params, examples, cfg: ModelConfig,
                       teacher_cfg: ModelConfig | None = None, **mode) -> ScoredBatch:
    """Learnability of each example within the super-batch `examples`."""
    teacher_cfg = teacher_cfg or cfg
    if cfg.vit.embed_dim != teacher_cfg.vit.embed_dim:
        raise ValueError("learner and teacher must share the embedding dimension")
    ids = [e.example_id for e in examples]
    return score_embeddings(ids, _model_view(learner_params, cfg, examples, **mode),
                            _model_view(teacher_params, teacher_cfg, examples, **mode))


def _top(scores: np.ndarray, ids: list, candidates: list[int], k: int) -> list[int]:
    # highest score first; ties go to the lowest example id
    order = sorted(candidates, key=lambda i: (-scores[i], ids[i]))
    return order[:k]


def chunk_sizes(k: int, n_chunks: int) -> list[int]:
    n_chunks = min(n_chunks, k) or 1
    base, extra = divmod(k, n_chunks)
    return [base + (1 if c < extra else 0) for c in range(n_chunks)]


def select_batch(scored: ScoredBatch, config: CurationConfig) -> list:
    """Chunked greedy joint selection of `batch_size` example ids.

    The first chunk is the top of the per-example learnability ranking;
    later chunks re-score every remaining example by its pair terms with
    the examples already chosen.
    """
    n, k = len(scored), config.batch_size
    if k > n:
        raise ValueError(f"batch_size {k} exceeds super-batch of {n}")
    if n != config.super_batch:
        raise ValueError(f"expected a super-batch of {config.super_batch}, got {n}")
    ids = scored.ids
    D = scored.pair
    chosen: list[int] = []
    remaining = list(range(n))
    for size in chunk_sizes(k, config.n_chunks):
        if not chosen:
            scores = scored.learnability
        else:
            sel = np.array(chosen)
            scores = np.diag(D) + D[:, sel].sum(1) + D[sel, :].sum(0)
        picked = _top(scores, ids, remaining, size)
        chosen.extend(picked)
        picked_set = set(picked)
        remaining = [i for i in remaining if i not in picked_set]
    return [ids[i] for i in chosen]


def joint_learnability(pair: np.ndarray, subset) -> float:
    """Learnability of a sub-batch: sum of its pair terms."""
    s = np.asarray(list(subset), dtype=int)
    return float(pair[np.ix_(s, s)].sum())


def curation_record(step: int, scored: ScoredBatch, selected: list) -> dict:
    sel = set(selected)
    lv = scored.learnability
    chosen = np.array([e.learnability for e in scored.examples if e.example_id in sel])
    return {"step": step, "selected": [str(i) for i in selected],
            "score_mean": float(lv.mean()), "score_min": float(lv.min()), "score_max": float(lv.max()),
            "selected_mean": float(chosen.mean()) if len(chosen) else 0.0}


class CurationLog:
    """Line-delimited audit trail of curation decisions."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(rec) + "\n")


# ------------------------------------------------------------- fine-tuning

def _state(params: Params, seed: int):
    from .trainer import AdamState, TrainState
    copy = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in params.items()}
    return TrainState(copy, AdamState(), rng=np.random.default_rng(seed))


def sigmoid_trainable(params: Params) -> set[str]:
    """Encoder towers plus the sigmoid-loss scalars: everything the image-text loss touches."""
    return E.encoder_names(params)


def finetune_teacher_on_curated(teacher_params: Params, curated_stream, steps: int, cfg: ModelConfig,
                                lr: float = 3e-4, batch_size: int = 32, seed: int = 0,
                                records: list | None = None) -> Params:
    """Image-text (sigmoid) loss fine-tune of a copy of the teacher on curated examples.

    `curated_stream` is any iterator of examples; `records` collects per-step losses.
    """
    from .trainer import InputMode, TrainPlan, train_step
    state = _state(teacher_params, seed)
    if steps <= 0:
        return state.params
    plan = TrainPlan(batch_size=max(batch_size, 2))
    names = sigmoid_trainable(state.params)
    stream = iter(curated_stream)
    for step in range(steps):
        batch = [next(stream) for _ in range(batch_size)]
        rec = train_step(state, cfg, plan, "acid_finetune", batch, lr, InputMode(),
                         L.LossWeights(size=plan.model_size), weight_decay=0.0, trainable=names)
        if records is not None:
            records.append(dict(rec, step=step))
    return state.params


def curated_stream(seed: int, start: int = 0, noise: float = 0.3, mix: float = 0.9):
    """Endless stream of curated-tier (noiseless) training examples."""
    i = start
    while True:
        yield from generate(seed, 256, mix, noise, start=i, curated_fraction=1.0)
        i += 256


@dataclass
class AcidArm:
    """One fine-tune arm: `curated` picks by learnability, the control takes the first n."""
    name: str
    curated: bool


def acid_finetune(learner_params: Params, teacher_params: Params, cfg: ModelConfig, config: CurationConfig,
                  steps: int, data_seed: int, start: int = 0, lr: float = 1e-5, curated: bool = True,
                  teacher_cfg: ModelConfig | None = None, log: CurationLog | None = None,
                  mix: float = 0.9, noise: float = 0.3, records: list | None = None) -> Params:
    """Sigmoid-loss fine-tune of a learner copy, one selected batch per super-batch.

    Both arms draw the same super-batches from the diverse stream; the control
    trains on the first `batch_size` of each, the curated arm on the chunked
    greedy selection. Learning rate `lr`, no weight decay.
    """
    from .trainer import InputMode, TrainPlan, train_step
    state = _state(learner_params, data_seed)
    plan = TrainPlan(batch_size=max(config.batch_size, 2))
    names = sigmoid_trainable(state.params)
    n = config.super_batch
    for step in range(steps):
        sup = list(generate(data_seed, n, mix, noise, start=start + step * n))
        if curated:
            scored = score_learnability(state.params, teacher_params, sup, cfg, teacher_cfg)
            ids = select_batch(scored, config)
            if log is not None:
                log.write(curation_record(step, scored, ids))
            by_id = {e.example_id: e for e in sup}
            batch = [by_id[i] for i in ids]
        else:
            batch = sup[:config.batch_size]
        rec = train_step(state, cfg, plan, "acid_finetune", batch, lr, InputMode(),
                         L.LossWeights(size=plan.model_size), weight_decay=0.0, trainable=names)
        if records is not None:
            records.append(dict(rec, step=step, arm="acid" if curated else "control"))
    return state.params


def run_acid_experiment(learner_params: Params, teacher_params: Params, cfg: ModelConfig,
                        config: CurationConfig, sets, steps: int = 100, seeds=(7, 8, 9), lr: float = 1e-5,
                        start: int = 10 ** 7, log_dir=None) -> dict:
    """Curated vs control fine-tune per seed; recall@1 on the (curated-tier) retrieval split.

    Returns per-seed numbers and their medians.
    """
    from .evaluation import evaluate
    rows = []
    for seed in seeds:
        row = {"seed": seed}
        for arm in (AcidArm("acid", True), AcidArm("control", False)):
            log = CurationLog(None if log_dir is None else Path(log_dir) / f"curation_seed{seed}.jsonl") \
                if arm.curated else None
            params = acid_finetune(learner_params, teacher_params, cfg, config, steps, seed, start, lr,
                                   arm.curated, log=log)
            row[arm.name] = evaluate(params, cfg, sets)["recall_at_1"]
        rows.append(row)
    return {"per_seed": rows,
            "acid_median": float(np.median([r["acid"] for r in rows])),
            "control_median": float(np.median([r["control"] for r in rows]))}
