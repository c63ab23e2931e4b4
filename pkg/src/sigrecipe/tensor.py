"""Dense tensors with tape-based reverse-mode autodiff.

A `Tape` records every op whose inputs require gradients while it is active
(``with Tape() as tape: ...``). Nodes are appended in creation order, which is
already a topological order, so `Tape.backward` is a single reverse sweep.
Outside an active tape nothing is recorded and ops are plain numpy calls.
"""
from __future__ import annotations

import threading
from typing import Callable, Mapping, Sequence

import numpy as np

NEG_INF = -1e30


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    shape = property(lambda self: self.data.shape)
    dtype = property(lambda self: self.data.dtype)
    ndim = property(lambda self: self.data.ndim)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return mul(self, 1.0 / o) if np.isscalar(o) else div(self, o)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, o): return matmul(self, o)
    def __getitem__(self, idx): return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python/numpy scalars adopt the dtype of the tensor operand
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


class _Node:
    __slots__ = ("out", "inputs", "backward", "op")

    def __init__(self, out, inputs, backward, op):
        self.out, self.inputs, self.backward, self.op = out, inputs, backward, op


class Tape:
    """Ordered record of differentiable ops."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def record(self, out: Tensor, inputs: Sequence[Tensor], backward: Callable, op: str):
        out.node_id = len(self.nodes)
        out.requires_grad = True
        self.nodes.append(_Node(out, inputs, backward, op))

    def backward(self, loss: Tensor, wrt: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar `loss`.

        Returns gradients for every tensor in `wrt` (zeros for leaves the loss
        does not depend on).
        """
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss.node_id is None or loss.node_id >= len(self.nodes) or self.nodes[loss.node_id].out is not loss:
            raise TapeError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        out = {}
        for name, t in (wrt or {}).items():
            g = grads.get(id(t))
            out[name] = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
        return out


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # a finite sum implies finite entries; overflowing sums fall through to the full check
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, tuple(inputs), backward, op)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _bcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from e


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    if np.isscalar(b) and isinstance(a, Tensor):
        c = b
        return _make(a.data * np.asarray(c, a.dtype), (a,), lambda g: (g * np.asarray(c, g.dtype),), "mul")
    if np.isscalar(a) and isinstance(b, Tensor):
        return mul(b, a)
    a, b = _pair(a, b)
    _bcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _bcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)), "div")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise NonFiniteError("non-finite value produced by log")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def log_sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = -np.logaddexp(0, -xd)
    # d/dx log sigmoid(x) = sigmoid(-x)
    return _make(out, (x,), lambda g: (g * np.exp(-np.logaddexp(0, xd)),), "log_sigmoid")


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    c = xd.dtype.type(np.sqrt(2.0 / np.pi))
    k = xd.dtype.type(0.044715)
    x2 = xd * xd
    th = x2 * k
    th += 1
    th *= xd
    th *= c
    np.tanh(th, out=th)
    out = th + 1
    out *= xd
    out *= 0.5

    def backward(g):
        # 0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 k x^2)
        d = th * th
        np.subtract(1, d, out=d)
        inner = x2 * (3 * k)
        inner += 1
        d *= inner
        d *= xd
        d *= 0.5 * c
        d += 0.5
        inner = np.multiply(th, 0.5, out=inner)
        d += inner
        d *= g
        return (d,)

    return _make(out, (x,), backward, "gelu")


def masked_fill(x: Tensor, mask, value: float = NEG_INF) -> Tensor:
    """Set entries where `mask` is 1 to `value`; masked entries get no gradient."""
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("masked_fill: mask must be {0,1}-valued")
    m = m.astype(bool)
    _bcast_shape(x, Tensor(m.astype(np.float32)), "masked_fill")
    out = np.where(m, np.asarray(value, x.dtype), x.data)
    return _make(out, (x,), lambda g: (_unbroadcast(np.where(m, 0, g), x.shape),), "masked_fill")


# ----------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    gshape, bshape = gamma.shape, beta.shape

    def backward(g):
        dxhat = g * gamma.data
        n = xd.shape[-1]
        dx = inv / n * (n * dxhat - dxhat.sum(-1, keepdims=True) - xhat * (dxhat * xhat).sum(-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gshape), _unbroadcast(g, bshape)

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True) + eps)
    y = xd / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")


# ------------------------------------------------------------------- linalg

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward(g):
        if bd.ndim == 2:
            da = g @ bd.T
            db = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            da = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            db = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return da, db

    return _make(out, (a, b), backward, "matmul")


def linear(x: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ kernel (+ bias) for x of any leading shape and a 2-D kernel."""
    if kernel.ndim != 2 or x.shape[-1] != kernel.shape[0]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and {kernel.shape}")
    xd, kd = x.data, kernel.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out2 = x2 @ kd
    if bias is not None:
        out2 += bias.data
    out = out2.reshape(xd.shape[:-1] + (kd.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        dx = (g2 @ kd.T).reshape(xd.shape)
        dk = x2.T @ g2
        return (dx, dk) if bias is None else (dx, dk, g2.sum(0))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _make(out, inputs, backward, "linear")


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, fill: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention on [B, L, W] inputs.

    `fill` ({0,1}, broadcastable to [B, H, Lq, Lk]) marks logits that are
    suppressed before the softmax; those positions get exactly zero weight.
    """
    if q.ndim != 3 or k.shape != v.shape or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"attention: incompatible shapes {q.shape}, {k.shape}, {v.shape}")
    b, lq, w = q.shape
    lk = k.shape[1]
    if w % heads:
        raise ShapeError(f"attention: width {w} not divisible by {heads} heads")
    d = w // heads
    scale = np.asarray(1.0 / np.sqrt(d), q.dtype)
    qh = q.data.reshape(b, lq, heads, d).transpose(0, 2, 1, 3)
    kh = k.data.reshape(b, lk, heads, d).transpose(0, 2, 1, 3)
    vh = v.data.reshape(b, lk, heads, d).transpose(0, 2, 1, 3)
    s = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if fill is not None:
        m = np.asarray(fill)
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("attention: fill mask must be {0,1}-valued")
        s = np.where(m.astype(bool), np.asarray(NEG_INF, s.dtype), s)
    s -= s.max(-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(-1, keepdims=True)
    oh = p @ vh
    out = oh.transpose(0, 2, 1, 3).reshape(b, lq, w)

    def backward(g):
        gh = g.reshape(b, lq, heads, d).transpose(0, 2, 1, 3)
        dv = p.transpose(0, 1, 3, 2) @ gh
        dp = gh @ vh.transpose(0, 1, 3, 2)
        ds = p * (dp - (dp * p).sum(-1, keepdims=True)) * scale
        dq = ds @ kh
        dk = ds.transpose(0, 1, 3, 2) @ qh
        merge = lambda t, n: t.transpose(0, 2, 1, 3).reshape(b, n, w)
        return merge(dq, lq), merge(dk, lk), merge(dv, lk)

    return _make(out, (q, k, v), backward, "attention")


# ------------------------------------------------------------------- shapes

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: cannot reshape {src} to {shape}") from e
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                 lambda g: (g.transpose(inv),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as e:
        raise ShapeError(f"concat: {[x.shape for x in xs]}") from e
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(out, tuple(xs), backward, "concat")


def slice_(x: Tensor, idx) -> Tensor:
    """Basic/advanced indexing; the result is always a copy."""
    out = np.array(x.data[idx], copy=True)
    shape, dtype = x.shape, x.dtype

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros(shape, dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(out, (x,), backward, "slice")


def gather(x: Tensor, indices, axis: int = 0) -> Tensor:
    """`np.take` along `axis` (embedding lookup for axis=0)."""
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise TypeError("gather: indices must be integers")
    n = x.shape[axis]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise ShapeError(f"gather: index out of range for axis of size {n}")
    out = np.take(x.data, idx, axis=axis)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype)
        if axis == 0:
            np.add.at(full, idx.reshape(-1), g.reshape((-1,) + shape[1:]))
        else:
            moved = np.moveaxis(full, axis, 0)
            gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
            np.add.at(moved, idx.reshape(-1), gm.reshape((-1,) + moved.shape[1:]))
        return (full,)

    return _make(out, (x,), backward, "gather")


def take_along(x: Tensor, indices, axis: int = -1) -> Tensor:
    """`np.take_along_axis`; used to pick target log-probabilities."""
    idx = np.asarray(indices)
    out = np.take_along_axis(x.data, idx, axis=axis)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype)
        # indices along `axis` may repeat; accumulate explicitly
        grid = list(np.indices(idx.shape, sparse=True))
        grid[axis % len(shape)] = idx
        np.add.at(full, tuple(grid), g)
        return (full,)

    return _make(out, (x,), backward, "take_along")


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ------------------------------------------------------------------- resize

def _resize_weights(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    """Row-stochastic [n_out, n_in] matrix for 1-D triangle-filter resampling."""
    scale = n_in / n_out
    support = max(1.0, scale) if antialias else 1.0
    centers = (np.arange(n_out) + 0.5) * scale - 0.5
    taps = np.arange(n_in)
    w = np.maximum(0.0, 1.0 - np.abs(taps[None, :] - centers[:, None]) / support)
    total = w.sum(axis=1, keepdims=True)
    # an output whose window misses every tap falls back to the nearest input
    empty = total[:, 0] == 0
    if empty.any():
        nearest = np.clip(np.round(centers[empty]).astype(int), 0, n_in - 1)
        w[empty] = 0.0
        w[empty, nearest] = 1.0
        total = w.sum(axis=1, keepdims=True)
    return w / total


def resize_matrix(n_in: int, n_out: int, antialias: bool = True) -> np.ndarray:
    if n_in < 1 or n_out < 1:
        raise ShapeError("resize: sizes must be >= 1")
    if n_in == n_out:
        return np.eye(n_in)
    return _resize_weights(n_in, n_out, antialias)


def bilinear_resize_antialias(grid: Tensor, new_h: int, new_w: int) -> Tensor:
    """Separable bilinear resize of an [h, w, d] grid.

    The triangle kernel is widened by the scale factor on downscale, so this
    is a plain bilinear interpolation on upscale and an area-aware filter on
    downscale. Same-size requests return an exact copy.
    """
    if grid.ndim != 3 or 0 in grid.shape:
        raise ShapeError(f"resize: expected non-empty [h, w, d] grid, got {grid.shape}")
    if new_h < 1 or new_w < 1:
        raise ShapeError(f"resize: target {new_h}x{new_w} is empty")
    h, w, _ = grid.shape
    if (h, w) == (new_h, new_w):
        return _make(grid.data.copy(), (grid,), lambda g: (g,), "resize")
    ah = resize_matrix(h, new_h).astype(grid.dtype)
    aw = resize_matrix(w, new_w).astype(grid.dtype)
    out = np.einsum("ih,hwd,jw->ijd", ah, grid.data, aw, optimize=True)
    return _make(out, (grid,), lambda g: (np.einsum("ih,ijd,jw->hwd", ah, g, aw, optimize=True),), "resize")


def parameters_finite(params: Mapping[str, Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params.values())


def zeros_like_tree(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v.data) for k, v in params.items()}

