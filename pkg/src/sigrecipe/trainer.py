"""Staged training: optimizer, LR schedule, EMA teacher and resolution branches."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import augment
from . import decoder as D
from . import encoders as E
from . import losses as L
from .data import generate
from .model import ModelConfig, image_batch, init_distill
from .nn import Params
from .tensor import NonFiniteError, ShapeError, Tape, Tensor

log = logging.getLogger(__name__)

DESK_SEQ_LENS = (16, 64, 144)


@dataclass
class TrainPlan:
    total_steps: int = 2000
    warmup_steps: int = 100
    peak_lr: float = 3e-3
    weight_decay: float = 1e-4
    grad_clip_norm: float = 1.0
    batch_size: int = 64
    ema_momentum: float = 0.99
    model_size: str = "B"
    lr_stretch: float = 3.75
    tips_frac: float = 0.8
    naflex_frac: float = 0.9
    fixedres_frac: float = 0.95

    def __post_init__(self):
        if self.model_size not in L.SIZE_FACTORS:
            raise ValueError(f"unknown model_size {self.model_size!r}")
        for name in ("peak_lr", "weight_decay", "grad_clip_norm", "warmup_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0.0 <= self.ema_momentum <= 1.0:
            raise ValueError("ema_momentum must lie in [0, 1]")
        if self.lr_stretch < 1:
            raise ValueError("lr_stretch must be >= 1")
        if not (self.warmup_steps < self.tips_start < self.naflex_branch < self.fixedres_branch
                < self.total_steps):
            raise ValueError("stage boundaries must satisfy warmup < tips_start < naflex_branch "
                             "< fixedres_branch < total_steps")

    @property
    def tips_start(self) -> int:
        return int(round(self.tips_frac * self.total_steps))

    @property
    def naflex_branch(self) -> int:
        return int(round(self.naflex_frac * self.total_steps))

    @property
    def fixedres_branch(self) -> int:
        return int(round(self.fixedres_frac * self.total_steps))

    def horizon(self, branch: str = "main") -> int:
        if branch == "naflex":
            n0 = self.naflex_branch
            return n0 + int(round(self.lr_stretch * (self.total_steps - n0)))
        if branch in ("main", "fixedres"):
            return self.total_steps
        raise ValueError(f"unknown branch {branch!r}")


def lr_at(step: float, plan: TrainPlan, branch: str = "main") -> float:
    """Linear warmup then cosine decay to zero at the branch's horizon.

    The NaFlex branch replays the schedule after its fork point slowed down
    by `lr_stretch`, so it is continuous at the fork and ends at zero.
    """
    horizon = plan.horizon(branch)
    if not 0 <= step <= horizon:
        raise ValueError(f"step {step} outside schedule [0, {horizon}]")
    if branch == "naflex" and step > plan.naflex_branch:
        n0 = plan.naflex_branch
        step = n0 + (step - n0) * (plan.total_steps - n0) / (horizon - n0)
    if step < plan.warmup_steps:
        return plan.peak_lr * step / plan.warmup_steps
    span = plan.total_steps - plan.warmup_steps
    return plan.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - plan.warmup_steps) / span))


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: dict[str, int] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def reset(self, names=None) -> None:
        """Drop moment slots (all, or only `names`); they restart from zero."""
        for k in list(self.m) if names is None else names:
            self.m.pop(k, None)
            self.v.pop(k, None)
            self.t.pop(k, None)


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))


def adam_step(params: Params, grads: dict[str, np.ndarray], state: AdamState, plan: TrainPlan,
              lr: float, weight_decay: float | None = None) -> dict[str, float]:
    """Clip to global norm, Adam with bias correction, decoupled weight decay.

    Updates only the parameters named in `grads`, in place.
    """
    wd = plan.weight_decay if weight_decay is None else weight_decay
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if g.shape != params[k].shape:
            raise ShapeError(f"{k}: gradient shape {g.shape} != parameter shape {params[k].shape}")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteError("non-finite gradient")
    scale = min(1.0, plan.grad_clip_norm / norm) if norm > 0 else 1.0
    b1, b2 = state.beta1, state.beta2
    for k, g in grads.items():
        p = params[k]
        g = g * scale if scale != 1.0 else g
        if k not in state.m:
            state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
            state.t[k] = 0
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        state.t[k] += 1
        t = state.t[k]
        update = (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + state.eps)
        p.data = (p.data - lr * (update + wd * p.data)).astype(p.dtype)
    return {"grad_norm": norm, "clip_scale": scale}


def ema_update(teacher: dict[str, np.ndarray], student: Params, m: float) -> dict[str, np.ndarray]:
    """teacher <- m * teacher + (1 - m) * student, in place."""
    if set(teacher) != set(student):
        raise KeyError("ema_update: teacher and student trees differ")
    for k, t in teacher.items():
        s = student[k].data
        if s.shape != t.shape:
            raise ShapeError(f"ema_update: {k} has shape {s.shape} vs {t.shape}")
        t *= m
        t += (1 - m) * s
    return teacher


# ---------------------------------------------------------------- run state

@dataclass
class DataConfig:
    seed: int = 7
    mix: float = 0.9
    noise: float = 0.3
    curated_fraction: float = 0.0


@dataclass
class InputMode:
    """How images become patch sequences: a square side, or a NaFlex sequence length."""
    side: int | None = None
    patch_size: int | None = None
    seq_len: int | None = None

    def kwargs(self) -> dict:
        return {"side": self.side, "patch_size": self.patch_size, "seq_len": self.seq_len}


@dataclass
class TrainState:
    params: Params
    opt: AdamState
    step: int = 0
    cursor: int = 0                       # next example index in the training stream
    teacher: dict[str, np.ndarray] | None = None
    centers: dict[str, np.ndarray] = field(default_factory=dict)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    def clone(self) -> "TrainState":
        return TrainState({k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()},
                          copy.deepcopy(self.opt), self.step, self.cursor,
                          None if self.teacher is None else {k: v.copy() for k, v in self.teacher.items()},
                          {k: v.copy() for k, v in self.centers.items()}, copy.deepcopy(self.rng))


def stage_at(step: int, plan: TrainPlan, branch: str = "main") -> str:
    if branch == "naflex" and step >= plan.naflex_branch:
        return "naflex_adapt"
    if branch == "fixedres" and step >= plan.fixedres_branch:
        return "fixedres_adapt"
    if branch == "acid":
        return "acid_finetune"
    return "pre80" if step < plan.tips_start else "post80"


def start_distillation(state: TrainState, cfg: ModelConfig) -> None:
    """Fresh projection heads and mask token; the teacher starts as an exact student copy."""
    heads = init_distill(cfg, state.rng)
    state.opt.reset(list(heads))
    state.params.update(heads)
    state.teacher = {k: v.data.copy() for k, v in state.params.items()}
    k = cfg.distill.proto_dim
    state.centers = {"global": np.zeros(k, np.float32), "patch": np.zeros(k, np.float32)}


def _teacher_tensors(teacher: dict[str, np.ndarray]) -> Params:
    return {k: Tensor(v) for k, v in teacher.items()}


def distillation_parts(state: TrainState, cfg: ModelConfig, images, mode: InputMode,
                       n_local: int = 8) -> tuple[dict, dict]:
    """Consistency and masked-prediction terms on augmented views.

    Returns (loss tensors, teacher projections for the center update).
    """
    rng, params = state.rng, state.params
    side = mode.side or cfg.image_side
    p = mode.patch_size or cfg.vit.patch_size
    if (side // 2) % p:
        raise ShapeError(f"local views of side {side // 2} are not a multiple of patch size {p}")
    gviews = [augment.global_view(im, rng, side) for im in images]
    lviews = [v for im in images for v in augment.local_views(im, rng, side // 2, n_local)]
    gbatch = image_batch(gviews, cfg, side=side, patch_size=p)
    lbatch = image_batch(lviews, cfg, side=side // 2, patch_size=p)
    dc = cfg.distill

    teacher = _teacher_tensors(state.teacher)
    t_emb, t_tok = E.encode_image(teacher, gbatch, cfg.vit)
    t_glob = L.project(t_emb, teacher, "global_head").data
    t_patch = L.project(t_tok, teacher, "patch_head").data

    b = len(images)
    s_emb, _ = E.encode_image(params, lbatch, cfg.vit)
    s_proj = L.project(s_emb, params, "global_head")            # rows ordered image-major
    s_proj = s_proj.reshape(b, n_local, -1)
    views = [s_proj[:, j] for j in range(n_local)]
    cons = L.consistency_loss(views, t_glob, state.centers["global"], dc)

    mpos = L.sample_mask_positions(gbatch.mask, rng, 0.5)
    _, m_tok = E.encode_image(params, gbatch, cfg.vit, mask_positions=mpos,
                              mask_token=params["distill.mask_token"])
    m_proj = L.project(m_tok, params, "patch_head")
    mask = L.masked_prediction_loss(m_proj, t_patch, mpos, state.centers["patch"], dc, gbatch.mask)
    return {"cons": cons, "mask": mask}, {"global": t_glob, "patch": t_patch[gbatch.mask > 0]}


def train_step(state: TrainState, cfg: ModelConfig, plan: TrainPlan, stage: str, examples, lr: float,
               mode: InputMode, weights: L.LossWeights, weight_decay: float | None = None,
               trainable: set[str] | None = None) -> dict:
    """One optimizer update on `examples` under `stage`'s loss table."""
    active = {k: w for k, w in L.stage_weights(stage, weights).items() if w > 0}
    images = [e.image for e in examples]
    ids, tmask = E.tokenize_batch([e.caption for e in examples], cfg.text.max_len)
    batch = image_batch(images, cfg, **mode.kwargs())
    image_valid = None if batch.mask.all() else batch.mask
    params = state.params
    teacher_proj = None
    with Tape() as tape:
        zi, tok = E.encode_image(params, batch, cfg.vit)
        zt = E.encode_text(params, ids, tmask, cfg.text)
        parts = {"sig": L.sigmoid_loss(zi, zt, params["sigmoid.t_prime"], params["sigmoid.b"])}
        if "dec" in active:
            targets = [D.DecoderTargets.from_example(e) for e in examples]
            parallel = D.sample_parallel_mode(state.rng)
            parts["dec"] = D.decode_loss(params, tok, targets, parallel, cfg.decoder, state.rng, image_valid)
        if "cons" in active:
            if state.teacher is None:
                raise RuntimeError(f"stage {stage} needs an EMA teacher")
            extra, teacher_proj = distillation_parts(state, cfg, images, mode)
            parts.update(extra)
        loss = L.total_loss(stage, parts, weights)
    names = trainable if trainable is not None else set(params)
    grads = tape.backward(loss, {k: params[k] for k in sorted(names)})
    stats = adam_step(params, grads, state.opt, plan, lr, weight_decay)
    if teacher_proj is not None:
        m = cfg.distill.center_momentum
        for key, proj in teacher_proj.items():
            state.centers[key] = L.update_center(state.centers[key], proj, m).astype(np.float32)
        ema_update(state.teacher, params, plan.ema_momentum)
    rec = {k: float(v.item()) for k, v in parts.items()}
    rec.update(total=float(loss.item()), lr=lr, grad_norm=stats["grad_norm"])
    return rec


# -------------------------------------------------------------------- stages

@dataclass
class BranchConfig:
    naflex_seq_lens: tuple[int, ...] = DESK_SEQ_LENS
    # (side, patch size) per fixed-resolution target
    fixedres_targets: tuple[tuple[int, int], ...] = ((48, 4),)
    reset_adam_fixedres: bool = True
    run_naflex: bool = True
    run_fixedres: bool = True


class MetricsWriter:
    """Append-only JSON-lines metrics stream."""

    def __init__(self, path: str | Path | None):
        self.path = None if path is None else Path(path)
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def init_state(cfg: ModelConfig, seed: int) -> TrainState:
    from .model import init_params
    rng = np.random.default_rng(seed)
    return TrainState(init_params(cfg, rng), AdamState(), rng=rng)


def _take(data: DataConfig, state: TrainState, n: int, **kw) -> list:
    ex = list(generate(data.seed, n, data.mix, data.noise, start=state.cursor,
                       curated_fraction=data.curated_fraction, **kw))
    state.cursor += n
    return ex


Hook = Callable[[str, TrainState], None]


def _run_segment(state, cfg, plan, data, weights, branch, end, mode_fn, metrics, hook, log_every):
    while state.step < end:
        stage = stage_at(state.step, plan, branch)
        if stage == "post80" and state.teacher is None:
            start_distillation(state, cfg)
            if hook:
                hook("tips_start", state)
        lr = lr_at(state.step, plan, branch)
        mode, sub = mode_fn(state)
        per = plan.batch_size // sub
        recs = [train_step(state, cfg, plan, stage, _take(data, state, per), lr, mode, weights)
                for _ in range(sub)]
        # one record per schedule step; split steps report their mean
        rec = {k: float(np.mean([r[k] for r in recs])) for k in recs[0]}
        rec.update(step=state.step, stage=stage, branch=branch, updates=sub)
        if mode.seq_len:
            rec["seq_len"] = mode.seq_len
        metrics.write(rec)
        if log_every and state.step % log_every == 0:
            log.info("%s step %d %s loss %.4f", branch, state.step, stage, rec["total"])
        state.step += 1


def run_stages(plan: TrainPlan, data: DataConfig, cfg: ModelConfig, branches: BranchConfig | None = None,
               weights: L.LossWeights | None = None, metrics_path=None, hook: Hook | None = None,
               log_every: int = 0, seed: int | None = None) -> dict[str, TrainState]:
    """Main run plus its NaFlex and fixed-resolution branches.

    Returns final states keyed "base", "naflex", "fixedres_<side>_p<patch>".
    """
    branches = branches or BranchConfig()
    weights = weights or L.LossWeights(size=plan.model_size)
    metrics = MetricsWriter(metrics_path)
    state = init_state(cfg, data.seed if seed is None else seed)
    fixed = lambda s: (InputMode(), 1)
    forks = {}
    for end in (plan.naflex_branch, plan.fixedres_branch, plan.total_steps):
        _run_segment(state, cfg, plan, data, weights, "main", end, fixed, metrics, hook, log_every)
        forks[end] = state.clone()
        if hook:
            hook(f"fork_{end}", state)
    out = {"base": state}

    if branches.run_naflex:
        nf = forks[plan.naflex_branch].clone()
        lens = tuple(branches.naflex_seq_lens)

        def naflex_mode(s):
            seq = int(lens[s.rng.integers(len(lens))])
            # the longest sequence runs half batches, twice
            return InputMode(seq_len=seq), (2 if seq == max(lens) else 1)

        _run_segment(nf, cfg, plan, data, weights, "naflex", plan.horizon("naflex"), naflex_mode,
                     metrics, hook, log_every)
        out["naflex"] = nf

    if branches.run_fixedres:
        for side, patch in branches.fixedres_targets:
            fr = forks[plan.fixedres_branch].clone()
            if branches.reset_adam_fixedres:
                fr.opt.reset()
            mode = InputMode(side=side, patch_size=patch)
            _run_segment(fr, cfg, plan, data, weights, "fixedres", plan.total_steps,
                         lambda s, m=mode: (m, 1), metrics, hook, log_every)
            out[f"fixedres_{side}_p{patch}"] = fr
    return out
