"""Procedural shapes-world: images whose content is exactly describable.

Every image holds 1-3 colored shapes laid out left to right; the English
caption names them in that order. A second toy language ("xx") is a fixed
letter substitution of English, so it has its own byte statistics.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

COLORS = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.2, 0.3, 0.95),
    "white": (0.95, 0.95, 0.95),
}
SHAPES = ("circle", "square", "cross", "ring")
COLOR_NAMES = tuple(COLORS)
N_CLASSES = len(COLORS) * len(SHAPES)

TRAIN_STREAM, EVAL_STREAM = 0, 1
_CIPHER = str.maketrans("abcdefghijklmnopqrstuvwxyz", "qzvkxjwyhbtmpsgclfnrdieauo")


@dataclass
class Example:
    example_id: str
    image: np.ndarray                                   # [H, W, 3] in [0, 1]
    caption_en: str
    caption_xx: str
    lang_tag: str
    quality_tier: str
    class_id: int
    shapes: list[tuple[str, str]]                       # (color, shape), left to right
    regions: list[tuple[tuple[float, float, float, float], str]] = field(default_factory=list)
    class_regions: list[tuple[tuple[float, float, float, float], str]] = field(default_factory=list)
    caption_noisy: bool = False

    @property
    def caption(self) -> str:
        return self.caption_en if self.lang_tag == "en" else self.caption_xx


def class_id_of(color: str, shape: str) -> int:
    return COLOR_NAMES.index(color) * len(SHAPES) + SHAPES.index(shape)


def class_name(class_id: int) -> tuple[str, str]:
    return COLOR_NAMES[class_id // len(SHAPES)], SHAPES[class_id % len(SHAPES)]


def class_prompt(class_id: int) -> str:
    color, shape = class_name(class_id)
    return f"a photo of a {color} {shape}"


def describe(shapes: list[tuple[str, str]]) -> str:
    if len(shapes) == 1:
        return f"a photo of a {shapes[0][0]} {shapes[0][1]}"
    return " left of ".join(f"a {c} {s}" for c, s in shapes)


def to_xx(text: str) -> str:
    return text.translate(_CIPHER)


_PHRASE = re.compile(r"a (%s) (%s)" % ("|".join(COLOR_NAMES), "|".join(SHAPES)))


def parse_caption(caption: str) -> list[tuple[str, str]]:
    """Recover (color, shape) pairs, left to right, from an English caption."""
    return [(m.group(1), m.group(2)) for m in _PHRASE.finditer(caption)]


def _shape_mask(kind: str, yy, xx, cy, cx, r):
    dy, dx = yy - cy, xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= 0.8 * r) & (np.abs(dx) <= 0.8 * r)
    if kind == "cross":
        t = r / 3
        return ((np.abs(dx) <= t) & (np.abs(dy) <= r)) | ((np.abs(dy) <= t) & (np.abs(dx) <= r))
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.5 * r) ** 2)
    raise ValueError(f"unknown shape {kind!r}")


def render(shapes, rng: np.random.Generator, size: tuple[int, int]):
    """Draw shapes left to right; returns (image, tight normalized boxes x0,y0,x1,y1)."""
    H, W = size
    img = np.full((H, W, 3), 0.08) + rng.normal(0, 0.02, (H, W, 3))
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    n = len(shapes)
    col_w = W / n
    boxes = []
    for k, (color, kind) in enumerate(shapes):
        r = min(col_w, H) * rng.uniform(0.28, 0.4)
        cx = col_w * (k + 0.5) + rng.uniform(-1, 1) * max(0.0, col_w / 2 - r - 1)
        cy = rng.uniform(r + 1, H - r - 1) if H > 2 * r + 2 else H / 2
        m = _shape_mask(kind, yy, xx, cy, cx, r)
        rgb = np.clip(np.array(COLORS[color]) + rng.uniform(-0.08, 0.08, 3), 0, 1)
        img[m] = rgb
        rows, cols = np.nonzero(m)
        boxes.append((cols.min() / W, rows.min() / H, (cols.max() + 1) / W, (rows.max() + 1) / H))
    return np.clip(img, 0, 1).astype(np.float32), boxes


def _add_distractors(caption: str, rng) -> str:
    words = caption.split(" ")
    pool = COLOR_NAMES + SHAPES
    for _ in range(int(rng.integers(1, 3))):
        words.insert(int(rng.integers(0, len(words) + 1)), pool[int(rng.integers(len(pool)))])
    return " ".join(words)


def make_example(seed: int, index: int, stream: int = TRAIN_STREAM, mix: float = 0.9,
                 noise: float = 0.3, curated_fraction: float = 0.0, n_shapes: int | None = None,
                 size_range: tuple[int, int] = (32, 48)) -> Example:
    rng = np.random.default_rng([seed, stream, index])
    n = int(rng.integers(1, 4)) if n_shapes is None else n_shapes
    shapes = [(COLOR_NAMES[int(rng.integers(len(COLORS)))], SHAPES[int(rng.integers(len(SHAPES)))])
              for _ in range(n)]
    size = (int(rng.integers(size_range[0], size_range[1] + 1)),
            int(rng.integers(size_range[0], size_range[1] + 1)))
    image, boxes = render(shapes, rng, size)
    tier = "curated" if rng.random() < curated_fraction else "diverse"
    caption = describe(shapes)
    noisy = tier == "diverse" and rng.random() < noise
    if noisy:
        caption = _add_distractors(caption, rng)
    lang = "en" if rng.random() < mix else "xx"
    regions = [(b, f"a {c} {s}") for b, (c, s) in zip(boxes, shapes)]
    class_regions = [(b, s) for b, (_, s) in zip(boxes, shapes)]
    prefix = "t" if stream == TRAIN_STREAM else "e"
    return Example(f"{prefix}{seed}-{index}", image, caption, to_xx(caption), lang, tier,
                   class_id_of(*shapes[0]), shapes, regions, class_regions, noisy)


def generate(seed: int, n: int, mix: float = 0.9, noise: float = 0.3, start: int = 0, **kw):
    """Deterministic stream of training examples `start .. start+n-1`."""
    for i in range(start, start + n):
        yield make_example(seed, i, TRAIN_STREAM, mix, noise, **kw)


@dataclass
class EvalSets:
    retrieval: list[Example]
    zero_shot: list[Example]
    class_prompts: list[str]
    referring: list[tuple[Example, str, tuple[float, float, float, float]]]


def eval_sets(seed: int, n_retrieval: int = 256, n_zero_shot: int = 320, n_referring: int = 256,
              **kw) -> EvalSets:
    """Held-out, noiseless English evaluation data drawn from a separate stream."""
    index = 0
    retrieval, seen = [], set()
    while len(retrieval) < n_retrieval:
        ex = make_example(seed, index, EVAL_STREAM, mix=1.0, noise=0.0, curated_fraction=1.0, **kw)
        index += 1
        if ex.caption_en not in seen:
            seen.add(ex.caption_en)
            retrieval.append(ex)
    zero_shot = []
    for _ in range(n_zero_shot):
        zero_shot.append(make_example(seed, index, EVAL_STREAM, mix=1.0, noise=0.0,
                                      curated_fraction=1.0, n_shapes=1, **kw))
        index += 1
    referring = []
    while len(referring) < n_referring:
        ex = make_example(seed, index, EVAL_STREAM, mix=1.0, noise=0.0, curated_fraction=1.0, **kw)
        index += 1
        if len(ex.shapes) > 1 and len(set(ex.shapes)) == len(ex.shapes):
            k = index % len(ex.regions)
            box, text = ex.regions[k]
            referring.append((ex, text, box))
    prompts = [class_prompt(c) for c in range(N_CLASSES)]
    return EvalSets(retrieval, zero_shot, prompts, referring)
