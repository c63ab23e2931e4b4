"""Crop augmentations producing the global and local views for self-distillation."""
from __future__ import annotations

import math

import numpy as np

from .naflex import resize_image


def random_resized_crop(image: np.ndarray, rng: np.random.Generator, area: tuple[float, float],
                        side: int, flip: bool = False) -> np.ndarray:
    """Crop a random region covering `area` (fraction range) of the image, resize to side x side."""
    H, W = image.shape[:2]
    frac = rng.uniform(*area)
    ratio = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
    h = int(np.clip(round(math.sqrt(frac * H * W / ratio)), 1, H))
    w = int(np.clip(round(math.sqrt(frac * H * W * ratio)), 1, W))
    y = int(rng.integers(0, H - h + 1))
    x = int(rng.integers(0, W - w + 1))
    out = resize_image(image[y:y + h, x:x + w], (side, side))
    if flip and rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out, dtype=np.float32)


def global_view(image, rng, side: int) -> np.ndarray:
    return random_resized_crop(image, rng, (0.5, 1.0), side, flip=True)


def local_views(image, rng, side: int, n: int = 8) -> list[np.ndarray]:
    return [random_resized_crop(image, rng, (0.05, 0.5), side) for _ in range(n)]
