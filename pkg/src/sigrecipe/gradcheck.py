"""Central finite-difference checks of every differentiable op and loss term (float64).

Each case builds a scalar function of named float64 inputs. A trial draws
fresh inputs and a random direction per input, and compares the tape's
directional derivative with (f(x + h v) - f(x - h v)) / 2h.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import decoder as D
from . import encoders as E
from . import losses as L
from . import nn
from . import tensor as T
from .naflex import resize_posemb
from .tensor import Tape, Tensor

Case = Callable[[np.random.Generator], tuple[Callable[[dict], Tensor], dict[str, np.ndarray]]]
CASES: dict[str, Case] = {}


def case(name: str):
    def register(fn):
        CASES[name] = fn
        return fn
    return register


def _probe(out: Tensor, rng) -> Tensor:
    """Scalarize an op output with fixed random weights so every entry is tested."""
    w = rng.normal(size=out.shape)
    return T.sum_(out * Tensor(w))


def _shape(rng, nd=2, lo=1, hi=4):
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(nd))


def _elementwise(name, fn, domain=lambda x: x):
    @case(name)
    def build(rng):
        shp = _shape(rng, int(rng.integers(1, 4)))
        x = domain(rng.normal(size=shp))
        w = rng.normal(size=shp)
        return (lambda a: T.sum_(fn(a["x"]) * Tensor(w))), {"x": x}


_elementwise("exp", T.exp)
_elementwise("log", T.log, lambda x: np.abs(x) + 0.5)
_elementwise("log_sigmoid", T.log_sigmoid, lambda x: 3 * x)
_elementwise("gelu", T.gelu, lambda x: 2 * x)
_elementwise("neg", lambda t: -t)


def _binary(name, fn, bdomain=lambda x: x):
    @case(name)
    def build(rng):
        shp = _shape(rng, 3)
        bshp = tuple(s if rng.random() < 0.5 else 1 for s in shp)[int(rng.integers(0, 3)):]
        x, y = rng.normal(size=shp), bdomain(rng.normal(size=bshp))
        w = rng.normal(size=shp)
        return (lambda a: T.sum_(fn(a["x"], a["y"]) * Tensor(w))), {"x": x, "y": y}


_binary("add", T.add)
_binary("sub", T.sub)
_binary("mul", T.mul)
_binary("div", T.div, lambda y: np.sign(y) * (np.abs(y) + 0.5))


@case("masked_fill")
def _masked_fill(rng):
    shp = _shape(rng, 2)
    m = (rng.random(shp) < 0.3).astype(float)
    w = rng.normal(size=shp)
    return (lambda a: T.sum_(T.masked_fill(a["x"], m, 0.7) * Tensor(w))), {"x": rng.normal(size=shp)}


@case("sum")
def _sum(rng):
    shp = _shape(rng, 3)
    axis = [None, 0, 1, (0, 2)][int(rng.integers(4))]
    keep = bool(rng.integers(2))
    return (lambda a: _probe(T.sum_(a["x"], axis, keep), np.random.default_rng(1))), {"x": rng.normal(size=shp)}


@case("mean")
def _mean(rng):
    shp = _shape(rng, 3)
    axis = [None, -1, (0, 1)][int(rng.integers(3))]
    return (lambda a: _probe(T.mean(a["x"], axis), np.random.default_rng(2))), {"x": rng.normal(size=shp)}


@case("softmax")
def _softmax(rng):
    shp = _shape(rng, 2, 1, 5)
    return (lambda a: _probe(T.softmax(a["x"], -1), np.random.default_rng(3))), {"x": 2 * rng.normal(size=shp)}


@case("log_softmax")
def _log_softmax(rng):
    shp = _shape(rng, 2, 1, 5)
    axis = int(rng.integers(2))
    return (lambda a: _probe(T.log_softmax(a["x"], axis), np.random.default_rng(4))), {"x": 2 * rng.normal(size=shp)}


@case("layer_norm")
def _layer_norm(rng):
    b, n = _shape(rng, 2, 2, 5)
    inputs = {"x": rng.normal(size=(b, n)), "g": rng.normal(size=n), "b": rng.normal(size=n)}
    return (lambda a: _probe(T.layer_norm(a["x"], a["g"], a["b"]), np.random.default_rng(5))), inputs


@case("l2_normalize")
def _l2(rng):
    shp = (int(rng.integers(1, 5)), int(rng.integers(2, 6)))   # a 1-vector normalizes to a constant
    return (lambda a: _probe(T.l2_normalize(a["x"]), np.random.default_rng(6))), {"x": rng.normal(size=shp) + 0.1}


@case("matmul")
def _matmul(rng):
    b, n, k, m = _shape(rng, 4)
    if rng.random() < 0.5:
        inputs = {"a": rng.normal(size=(b, n, k)), "b": rng.normal(size=(k, m))}
    else:
        inputs = {"a": rng.normal(size=(b, n, k)), "b": rng.normal(size=(b, k, m))}
    return (lambda a: _probe(T.matmul(a["a"], a["b"]), np.random.default_rng(7))), inputs


@case("linear")
def _linear(rng):
    b, n, k, m = _shape(rng, 4)
    inputs = {"x": rng.normal(size=(b, n, k)), "w": rng.normal(size=(k, m)), "c": rng.normal(size=m)}
    return (lambda a: _probe(T.linear(a["x"], a["w"], a["c"]), np.random.default_rng(8))), inputs


@case("attention")
def _attention(rng):
    b, lq, lk = _shape(rng, 3, 1, 4)
    heads = int(rng.integers(1, 3))
    w = heads * int(rng.integers(1, 4))
    fill = None
    if rng.random() < 0.5:
        valid = (rng.random((b, lk)) < 0.7).astype(float)
        valid[:, 0] = 1
        fill = nn.fill_mask(valid, lq, lk, causal=(lq == lk and rng.random() < 0.5))
    inputs = {"q": rng.normal(size=(b, lq, w)), "k": rng.normal(size=(b, lk, w)), "v": rng.normal(size=(b, lk, w))}
    return (lambda a: _probe(T.attention(a["q"], a["k"], a["v"], heads, fill), np.random.default_rng(9))), inputs


@case("reshape_transpose")
def _reshape(rng):
    a_, b_, c_ = _shape(rng, 3)
    return (lambda a: _probe(T.transpose(T.reshape(a["x"], (a_ * b_, c_)), (1, 0)), np.random.default_rng(10)),
            {"x": rng.normal(size=(a_, b_, c_))})


@case("concat")
def _concat(rng):
    n, m = _shape(rng, 2)
    inputs = {"x": rng.normal(size=(n, m)), "y": rng.normal(size=(int(rng.integers(1, 4)), m))}
    return (lambda a: _probe(T.concat([a["x"], a["y"], a["x"]], 0), np.random.default_rng(11))), inputs


@case("slice")
def _slice(rng):
    n, m = _shape(rng, 2, 2, 5)
    idx = (slice(1, None), slice(None, -1)) if rng.random() < 0.5 else (rng.integers(0, n, size=4),)
    return (lambda a: _probe(T.slice_(a["x"], idx), np.random.default_rng(12))), {"x": rng.normal(size=(n, m))}


@case("gather")
def _gather(rng):
    v, w = _shape(rng, 2, 2, 5)
    idx = rng.integers(0, v, size=(2, 3))
    return (lambda a: _probe(T.gather(a["x"], idx, 0), np.random.default_rng(13))), {"x": rng.normal(size=(v, w))}


@case("take_along")
def _take_along(rng):
    n, v = _shape(rng, 2, 2, 5)
    idx = rng.integers(0, v, size=(n, 2))
    return (lambda a: _probe(T.take_along(a["x"], idx, -1), np.random.default_rng(14))), {"x": rng.normal(size=(n, v))}


@case("resize")
def _resize(rng):
    h, w, d = _shape(rng, 3, 1, 5)
    nh, nw = _shape(rng, 2, 1, 6)
    return (lambda a: _probe(T.bilinear_resize_antialias(a["x"], nh, nw), np.random.default_rng(15)),
            {"x": rng.normal(size=(h, w, d))})


@case("resize_posemb")
def _resize_posemb(rng):
    g = int(rng.integers(1, 4))
    grid = _shape(rng, 2, 1, 5)
    return (lambda a: _probe(resize_posemb(a["x"], grid), np.random.default_rng(16)), {"x": rng.normal(size=(g * g, 3))})


@case("patch_kernel")
def _patch_kernel(rng):
    p = int(rng.integers(1, 4))
    q = int(rng.integers(1, 5))
    return (lambda a: _probe(E.patch_kernel(a["k"], q * q * 2), np.random.default_rng(17)),
            {"k": rng.normal(size=(p, p, 2, 3))})


# ---------------------------------------------------------------- loss terms

def _unit(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@case("sigmoid_loss")
def _sigmoid(rng):
    n, d = _shape(rng, 2, 1, 5)
    inputs = {"x": rng.normal(size=(n, d)), "y": rng.normal(size=(n, d)),
              "t": np.array(rng.normal()), "b": np.array(rng.normal() * 3)}

    def f(a):
        return L.sigmoid_loss(T.l2_normalize(a["x"]), T.l2_normalize(a["y"]), a["t"], a["b"])
    return f, inputs


@case("chunked_ce")
def _chunked(rng):
    n, w = _shape(rng, 2, 1, 4)
    v = int(rng.integers(2, 12))
    chunks = int(rng.integers(1, v + 1))
    tgt = rng.integers(0, v, size=n)
    wts = rng.random(n)
    inputs = {"h": rng.normal(size=(n, w)), "k": rng.normal(size=(w, v)), "b": rng.normal(size=v)}
    return (lambda a: D.chunked_ce(D.VocabProjection(a["h"], a["k"], a["b"]), tgt, chunks, wts)), inputs


@case("softmax_ce")
def _softmax_ce(rng):
    n, v = _shape(rng, 2, 2, 6)
    tgt = rng.integers(0, v, size=n)
    return (lambda a: D.softmax_ce(a["z"], tgt)), {"z": rng.normal(size=(n, v))}


def _tiny_decoder(rng):
    dcfg = D.DecoderConfig(width=8, depth=1, heads=2, max_len=16, n_chunks=3)
    params = D.init_decoder_params(dcfg, 6, rng)
    arrays = {k: rng.normal(0, 0.3, v.shape) for k, v in params.items()}
    targets = []
    for _ in range(2):
        cap = list(rng.integers(97, 123, size=int(rng.integers(1, 6))))
        x0, y0 = rng.uniform(0, 0.5, 2)
        box = (x0, y0, x0 + rng.uniform(0.1, 0.5), y0 + rng.uniform(0.1, 0.5))
        targets.append(D.DecoderTargets(cap, [(box, cap[:3])]))
    arrays["memory"] = rng.normal(size=(2, 3, 6))
    return dcfg, arrays, targets


def _decoder_case(kind, parallel):
    def build(rng):
        dcfg, arrays, targets = _tiny_decoder(rng)
        seed = int(rng.integers(1 << 30))

        def f(a):
            params = {k: v for k, v in a.items() if k != "memory"}
            return D.target_loss(params, a["memory"], targets, kind, parallel, dcfg, np.random.default_rng(seed))
        return f, arrays
    return build


CASES["decoder_caption_causal"] = _decoder_case("caption", False)
CASES["decoder_caption_parallel"] = _decoder_case("caption", True)
CASES["decoder_refer"] = _decoder_case("refer", False)
CASES["decoder_ground"] = _decoder_case("ground", False)
CASES["decoder_mixed_tasks"] = _decoder_case(["caption", "ground"], True)


@case("consistency_loss")
def _consistency(rng):
    b, k = _shape(rng, 2, 1, 5)
    cfg = L.DistillConfig(proto_dim=k)
    teacher = rng.normal(size=(b, k))
    center = rng.normal(size=k) * 0.1
    inputs = {f"s{j}": rng.normal(size=(b, k)) for j in range(3)}
    return (lambda a: L.consistency_loss([a[f"s{j}"] for j in range(3)], teacher, center, cfg)), inputs


@case("masked_prediction_loss")
def _masked(rng):
    b, s, k = _shape(rng, 3, 1, 4)
    cfg = L.DistillConfig(proto_dim=k)
    valid = np.ones((b, s))
    mask = L.sample_mask_positions(valid, rng, 0.5)
    if not mask.any():
        mask[0, 0] = 1
    teacher = rng.normal(size=(b, s, k))
    return (lambda a: L.masked_prediction_loss(a["s"], teacher, mask, np.zeros(k), cfg, valid)), \
        {"s": rng.normal(size=(b, s, k))}


@case("encoders")
def _encoders(rng):
    vit = E.VitConfig(patch_size=2, width=4, depth=1, heads=2, posemb_len=4, embed_dim=3)
    params = {k: v.data.astype(np.float64) for k, v in E.init_image_params(vit, rng).items()}
    from .naflex import PatchBatch
    patches = rng.normal(size=(2, 5, 12))
    mask = np.array([[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]], float)
    batch = PatchBatch(patches, mask, [(2, 2), (1, 5)])
    w = rng.normal(size=3)

    def f(a):
        emb, _ = E.encode_image(a, batch, vit)
        return T.sum_(emb * Tensor(w))
    return f, params


# -------------------------------------------------------------------- runner

@dataclass
class CaseResult:
    name: str
    trials: int
    max_rel_err: float
    seconds: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _evaluate(fn, arrays: dict[str, np.ndarray]) -> float:
    return float(fn({k: Tensor(v) for k, v in arrays.items()}).item())


def check_case(name: str, trials: int = 100, h: float = 1e-5, seed: int = 0) -> CaseResult:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst = 0.0
    t0 = time.time()
    for _ in range(trials):
        fn, arrays = CASES[name](rng)
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        leaves = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        with Tape() as tape:
            out = fn(leaves)
        grads = tape.backward(out, leaves)
        dirs = {k: rng.normal(size=v.shape) for k, v in arrays.items()}
        analytic = sum(float(np.vdot(grads[k], dirs[k])) for k in arrays)
        plus = _evaluate(fn, {k: v + h * dirs[k] for k, v in arrays.items()})
        minus = _evaluate(fn, {k: v - h * dirs[k] for k, v in arrays.items()})
        numeric = (plus - minus) / (2 * h)
        err = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8)
        if not math.isfinite(err):
            err = math.inf
        worst = max(worst, err)
    return CaseResult(name, trials, worst, time.time() - t0)


def run_suite(trials: int = 100, names=None, seed: int = 0) -> list[CaseResult]:
    return [check_case(n, trials, seed=seed) for n in (names or CASES)]
