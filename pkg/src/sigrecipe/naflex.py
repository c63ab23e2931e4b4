"""Native-aspect, variable-length image preprocessing and resolution adaptation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

FULLSCALE_SEQ_LENS = (128, 256, 576, 784, 1024)


@dataclass(frozen=True)
class ResizePlan:
    src: tuple[int, int]
    dst: tuple[int, int]
    grid: tuple[int, int]
    patch_size: int
    # uniform reference scale; per-axis distortion is measured against it
    scale: float

    def distortion(self) -> tuple[float, float]:
        (H, W), (h, w) = self.src, self.dst
        return abs(h / (self.scale * H) - 1.0), abs(w / (self.scale * W) - 1.0)

    def distortion_bound(self) -> tuple[float, float]:
        h, w = self.dst
        p = self.patch_size
        return (p - 1) / h, (p - 1) / w


@dataclass
class PatchSequence:
    patches: np.ndarray      # [S_target, p*p*3]
    coords: np.ndarray       # [S_target, 2] (row, col); padding rows are -1
    mask: np.ndarray         # [S_target] 1 = real patch
    grid: tuple[int, int]

    @property
    def seq_len(self) -> int:
        return self.patches.shape[0]


@dataclass
class PatchBatch:
    patches: np.ndarray      # [B, S, p*p*3]
    mask: np.ndarray         # [B, S]
    grids: list[tuple[int, int]]

    def __len__(self):
        return self.patches.shape[0]

    def take(self, idx) -> "PatchBatch":
        idx = list(idx)
        return PatchBatch(self.patches[idx], self.mask[idx], [self.grids[i] for i in idx])


def stack_sequences(seqs: list[PatchSequence]) -> PatchBatch:
    lens = {s.seq_len for s in seqs}
    if len(lens) != 1:
        raise ShapeError(f"sequences in a batch must share a target length, got {sorted(lens)}")
    return PatchBatch(np.stack([s.patches for s in seqs]).astype(np.float32),
                      np.stack([s.mask for s in seqs]).astype(np.float32),
                      [s.grid for s in seqs])


def _round(x: float) -> int:
    return max(1, math.floor(x + 0.5))


def plan_resize(H: int, W: int, p: int, seq_len: int) -> ResizePlan:
    """Patch-aligned target size that keeps the aspect ratio and fits `seq_len`.

    Uses the largest uniform scale whose per-axis rounding to whole patches
    fits the budget. For aspect ratios the budget can represent, each axis
    is then within half a patch of an exact uniform rescale.
    """
    if H < 1 or W < 1 or p < 1 or seq_len < 1:
        raise ValueError("plan_resize: sizes must be >= 1")

    def grid(s):
        return _round(s * H / p), _round(s * W / p)

    s0 = math.sqrt(seq_len * p * p / (H * W))
    gh, gw = grid(s0)
    if gh * gw <= seq_len:
        lo, hi = s0, s0
        # grow until the budget is exceeded
        while True:
            hi *= 2
            gh, gw = grid(hi)
            if gh * gw > seq_len:
                break
            lo = hi
    else:
        lo, hi = 0.0, s0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        gh, gw = grid(mid)
        if gh * gw <= seq_len:
            lo = mid
        else:
            hi = mid
    gh, gw = grid(lo)
    h, w = gh * p, gw * p

    # scales at which both axes round to (gh, gw)
    a = max((gh - 0.5) * p / H if gh > 1 else 0.0, (gw - 0.5) * p / W if gw > 1 else 0.0, 1e-300)
    b = min((gh + 0.5) * p / H, (gw + 0.5) * p / W)
    rh, rw = max(p - 1, 1e-12) / h, max(p - 1, 1e-12) / w

    def worst(s):
        return max(abs(h / (s * H) - 1) / rh, abs(w / (s * W) - 1) / rw)

    balanced = (1 / rh + 1 / rw) / (h / (H * rh) + w / (W * rw))
    cands = [c for c in (a, b * (1 - 1e-12), h / H, w / W, 1 / balanced) if a <= c < b] or [lo]
    return ResizePlan((H, W), (h, w), (gh, gw), p, min(cands, key=worst))


def resize_image(image: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    if image.shape[:2] == tuple(hw):
        return image
    return T.bilinear_resize_antialias(Tensor(image), *hw).data


def patchify(image: np.ndarray, plan: ResizePlan, seq_len: int | None = None) -> PatchSequence:
    """Split an already-resized image into row-major p x p patches, padded to `seq_len`."""
    p = plan.patch_size
    if image.ndim != 3 or image.shape[:2] != plan.dst:
        raise ShapeError(f"patchify: image {image.shape[:2]} does not match plan {plan.dst}")
    gh, gw = plan.grid
    seq_len = gh * gw if seq_len is None else seq_len
    if gh * gw > seq_len:
        raise ShapeError(f"patchify: grid {plan.grid} exceeds sequence length {seq_len}")
    c = image.shape[2]
    tiles = image.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)
    patches = np.zeros((seq_len, p * p * c), dtype=image.dtype)
    patches[: gh * gw] = tiles
    coords = np.full((seq_len, 2), -1, dtype=np.int64)
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    coords[: gh * gw] = np.stack([rows, cols], 1)
    mask = np.zeros(seq_len, dtype=np.float32)
    mask[: gh * gw] = 1
    return PatchSequence(patches, coords, mask, (gh, gw))


def unpatchify(seq: PatchSequence, patch_size: int, channels: int = 3) -> np.ndarray:
    gh, gw = seq.grid
    p = patch_size
    tiles = seq.patches[: gh * gw].reshape(gh, gw, p, p, channels)
    return tiles.transpose(0, 2, 1, 3, 4).reshape(gh * p, gw * p, channels)


def preprocess(image: np.ndarray, patch_size: int, seq_len: int) -> PatchSequence:
    """Aspect-preserving resize + patchify (the variable-resolution path)."""
    plan = plan_resize(image.shape[0], image.shape[1], patch_size, seq_len)
    return patchify(resize_image(image, plan.dst), plan, seq_len)


def preprocess_square(image: np.ndarray, patch_size: int, side: int) -> PatchSequence:
    """Fixed-resolution path: non-aspect-preserving resize to side x side."""
    g = side // patch_size
    plan = ResizePlan(image.shape[:2], (side, side), (g, g), patch_size, side / max(image.shape[:2]))
    return patchify(resize_image(image, (side, side)), plan)


def resize_posemb(posemb: Tensor, grid: tuple[int, int]) -> Tensor:
    """Resize a square learned position embedding [g0*g0, width] to a gh x gw grid."""
    n, width = posemb.shape
    g0 = math.isqrt(n)
    if g0 * g0 != n:
        raise ShapeError(f"resize_posemb: source length {n} is not a perfect square")
    gh, gw = grid
    out = T.bilinear_resize_antialias(posemb.reshape(g0, g0, width), gh, gw)
    return out.reshape(gh * gw, width)


def patch_resize_matrix(p: int, p_new: int) -> np.ndarray:
    """Linear map taking a flattened p x p patch to its p_new x p_new resize."""
    a = T.resize_matrix(p, p_new)
    return np.kron(a, a)


def pi_resize_patch_kernel(kernel: np.ndarray, p_new: int) -> np.ndarray:
    """Pseudo-inverse resize of a [p, p, c, width] patch-embedding kernel.

    For upsizing, tokens are preserved exactly:
    <new_kernel, resize(x)> == <kernel, x>. For downsizing the result is the
    least-squares best kernel.
    """
    p = kernel.shape[0]
    if p < 1 or p_new < 1:
        raise ValueError("pi_resize_patch_kernel: patch sizes must be >= 1")
    if p_new == p:
        return kernel.copy()
    c, width = kernel.shape[2], kernel.shape[3]
    B = patch_resize_matrix(p, p_new)
    flat = kernel.reshape(p * p, c * width).astype(np.float64)
    new = np.linalg.pinv(B.T) @ flat
    return new.reshape(p_new, p_new, c, width).astype(kernel.dtype)


def sample_seq_len(rng: np.random.Generator, choices=FULLSCALE_SEQ_LENS) -> int:
    return int(choices[rng.integers(len(choices))])
