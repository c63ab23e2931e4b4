"""Objective terms: pairwise sigmoid loss, self-distillation terms, staged total."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import Params
from .tensor import Tensor

SIZE_FACTORS = {"B": 0.25, "L": 0.5, "So400m": 1.0, "g": 0.5}
STAGES = ("pre80", "post80", "naflex_adapt", "fixedres_adapt", "acid_finetune")


@dataclass
class SigmoidLossParams:
    t_prime: float = math.log(10.0)
    b: float = -10.0


@dataclass
class DistillConfig:
    proto_dim: int = 32
    hidden: int = 128
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9

    def __post_init__(self):
        if not self.teacher_temp < self.student_temp:
            raise ValueError("DistillConfig: teacher_temp must be below student_temp")


@dataclass
class LossWeights:
    w_sig: float = 1.0
    w_dec: float = 1.0
    w_cons: float = 1.0
    w_mask: float = 0.25
    size: str = "B"

    def __post_init__(self):
        if self.size not in SIZE_FACTORS:
            raise ValueError(f"unknown model size {self.size!r}")
        if min(self.w_sig, self.w_dec, self.w_cons, self.w_mask) < 0:
            raise ValueError("loss weights must be nonnegative")

    @property
    def size_factor(self) -> float:
        return SIZE_FACTORS[self.size]


def init_sigmoid_params(cfg: SigmoidLossParams | None = None) -> Params:
    cfg = cfg or SigmoidLossParams()
    return {"sigmoid.t_prime": nn.param(np.array(cfg.t_prime), "sigmoid.t_prime"),
            "sigmoid.b": nn.param(np.array(cfg.b), "sigmoid.b")}


def _check_normalized(x: Tensor, what: str) -> None:
    norms = np.linalg.norm(x.data, axis=-1)
    if np.any(np.abs(norms - 1) > 1e-4):
        raise ValueError(f"sigmoid_loss: {what} embeddings are not l2-normalized")


def pair_logits(img: Tensor, txt: Tensor, t_prime: Tensor, b: Tensor) -> Tensor:
    return (img @ txt.transpose(1, 0)) * T.exp(t_prime) + b


def sigmoid_loss(img: Tensor, txt: Tensor, t_prime: Tensor, b: Tensor) -> Tensor:
    """-(1/n) sum_ij log sigmoid(z_ij * (t <x_i, y_j> + b)), z = +1 on the diagonal."""
    if img.ndim != 2 or img.shape != txt.shape:
        raise T.ShapeError(f"sigmoid_loss: got {img.shape} and {txt.shape}")
    _check_normalized(img, "image")
    _check_normalized(txt, "text")
    n = img.shape[0]
    z = (2 * np.eye(n) - 1).astype(img.dtype)
    logits = pair_logits(img, txt, t_prime, b)
    return -T.sum_(T.log_sigmoid(logits * z)) * (1.0 / n)


def pair_loss_matrix(img: np.ndarray, txt: np.ndarray, t_prime: float, b: float) -> np.ndarray:
    """Per-pair terms -log sigmoid(z_ij * logit_ij) as a plain array."""
    n = img.shape[0]
    logits = np.exp(t_prime) * (img @ txt.T) + b
    z = 2 * np.eye(n) - 1
    return np.logaddexp(0, -z * logits)


# -------------------------------------------------------------- distillation

def init_distill_params(cfg: DistillConfig, width: int, embed_dim: int, rng) -> Params:
    params: Params = {}
    for name, d_in in (("global_head", embed_dim), ("patch_head", width)):
        nn.init_dense(params, rng, f"distill.{name}.fc1", d_in, cfg.hidden)
        nn.init_dense(params, rng, f"distill.{name}.fc2", cfg.hidden, cfg.proto_dim)
    params["distill.mask_token"] = nn.param(rng.normal(0, 0.02, (1, 1, width)), "distill.mask_token")
    return params


def project(x: Tensor, params: Params, head: str) -> Tensor:
    return nn.mlp(x, params, f"distill.{head}")


def distill_ce(student_proj: Tensor, teacher_proj: np.ndarray, center: np.ndarray,
               cfg: DistillConfig) -> Tensor:
    """Row-wise CE(softmax((teacher - center)/t_teacher) || log_softmax(student/t_student)).

    The teacher side is a plain array: no gradient can reach it.
    """
    t = (np.asarray(teacher_proj, dtype=np.float64) - center) / cfg.teacher_temp
    t = np.exp(t - t.max(-1, keepdims=True))
    p = (t / t.sum(-1, keepdims=True)).astype(student_proj.dtype)
    logq = T.log_softmax(student_proj * (1.0 / cfg.student_temp), -1)
    return -T.sum_(logq * Tensor(p), axis=-1)


def consistency_loss(student_proj_views: list[Tensor], teacher_proj: np.ndarray, center: np.ndarray,
                     cfg: DistillConfig) -> Tensor:
    """Mean over local views (and batch) of the distillation CE against the global teacher view."""
    terms = [T.mean(distill_ce(s, teacher_proj, center, cfg)) for s in student_proj_views]
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out * (1.0 / len(terms))


def masked_prediction_loss(student_patch_proj: Tensor, teacher_patch_proj: np.ndarray,
                           mask_positions: np.ndarray, center: np.ndarray, cfg: DistillConfig,
                           valid: np.ndarray | None = None) -> Tensor:
    """Distillation CE on per-patch features, averaged over masked positions only."""
    m = np.asarray(mask_positions, dtype=bool)
    if not m.any():
        raise ValueError("masked_prediction_loss: mask has no positions")
    if valid is not None and np.any(m & (np.asarray(valid) == 0)):
        raise ValueError("masked_prediction_loss: mask covers padding tokens")
    ce = distill_ce(student_patch_proj, teacher_patch_proj, center, cfg)   # [B, S]
    w = Tensor((m / m.sum()).astype(ce.dtype))
    return T.sum_(ce * w)


def sample_mask_positions(valid: np.ndarray, rng: np.random.Generator, ratio: float = 0.5) -> np.ndarray:
    """Mask round(ratio * n_valid) real tokens per row; padding is never masked."""
    valid = np.atleast_2d(valid)
    out = np.zeros(valid.shape, dtype=np.float32)
    for i, row in enumerate(valid):
        idx = np.flatnonzero(row)
        k = int(math.floor(ratio * len(idx) + 0.5))
        out[i, rng.choice(idx, size=k, replace=False)] = 1
    return out


def update_center(center: np.ndarray, teacher_proj: np.ndarray, momentum: float) -> np.ndarray:
    batch_mean = teacher_proj.reshape(-1, teacher_proj.shape[-1]).mean(0)
    return momentum * center + (1 - momentum) * batch_mean


# --------------------------------------------------------------------- total

def stage_weights(stage: str, weights: LossWeights) -> dict[str, float]:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    if stage == "acid_finetune":
        return {"sig": weights.w_sig}
    out = {"sig": weights.w_sig, "dec": weights.w_dec}
    if stage in ("post80", "fixedres_adapt"):
        lam = weights.size_factor
        out["cons"] = lam * weights.w_cons
        out["mask"] = lam * weights.w_mask
    return out


def total_loss(stage: str, parts: dict, weights: LossWeights):
    """Weighted sum of the loss terms active in `stage` (works on floats or Tensors)."""
    out = None
    for key, w in stage_weights(stage, weights).items():
        if w == 0 and key not in parts:
            continue
        if key not in parts:
            raise KeyError(f"stage {stage} needs loss term {key!r}")
        term = parts[key] * w
        out = term if out is None else out + term
    return out
