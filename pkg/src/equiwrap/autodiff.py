"""Minimal reverse-mode autodiff over float64 numpy arrays.

Just enough tensor ops to express the backbones, the weight network, the
recurrent cells, and the training loops, plus `detach` for the
straight-through estimator. A node records its parents and a closure that
scatters the output gradient back to them; `backward` runs the closures in
reverse topological order. All data is float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import kernels

__all__ = [
    "DiffValue", "value", "param", "from_op", "backward", "detach",
    "add", "sub", "mul", "div", "scale", "neg", "matmul", "conv2d",
    "relu", "sigmoid", "tanh", "exp", "log", "softplus", "softmax",
    "mean", "total", "weighted_sum", "embed", "gather", "concat", "reshape",
    "cross_entropy", "mse", "grad_check", "no_grad", "grad_enabled",
    "reset_alloc_bytes", "alloc_bytes",
]

_grad_enabled = True
_alloc_bytes = 0


class no_grad:
    """Context manager: ops inside build no graph (frozen evaluation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def reset_alloc_bytes():
    """Reset the deterministic allocation counter (memory estimates)."""
    global _alloc_bytes
    _alloc_bytes = 0


def alloc_bytes() -> int:
    return _alloc_bytes


class DiffValue:
    """A node in the computation graph: float64 array + gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=""):
        global _alloc_bytes
        self.data = np.asarray(data, dtype=np.float64)
        _alloc_bytes += self.data.nbytes
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray):
        global _alloc_bytes
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
            _alloc_bytes += self.grad.nbytes
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"DiffValue(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"


def value(data, name="") -> DiffValue:
    return DiffValue(data, requires_grad=False, name=name)


def param(data, name="") -> DiffValue:
    return DiffValue(data, requires_grad=True, name=name)


def from_op(data, parents: Sequence[DiffValue],
            backward_fn: Callable[[np.ndarray], None]) -> DiffValue:
    """Register an op result; backward_fn scatters the output grad to parents."""
    out = DiffValue(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def detach(v: DiffValue) -> DiffValue:
    """Same forward value (shared storage), no gradient flows upstream."""
    return DiffValue(v.data)


def backward(root: DiffValue):
    """Reverse-topological gradient accumulation from a scalar root.

    Repeated calls without zeroing grads accumulate additively.
    """
    if root.data.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    topo: list[DiffValue] = []
    seen = set()
    stack: list[tuple[DiffValue, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    root.accumulate_grad(np.asarray(1.0))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            # interior grads are consumed per pass; only leaves accumulate
            # across repeated backward calls
            node.grad = None


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: DiffValue, b: DiffValue) -> DiffValue:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))
    return from_op(a.data + b.data, (a, b), bwd)


def sub(a: DiffValue, b: DiffValue) -> DiffValue:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(-_unbroadcast(g, b.data.shape))
    return from_op(a.data - b.data, (a, b), bwd)


def mul(a: DiffValue, b: DiffValue) -> DiffValue:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))
    return from_op(a.data * b.data, (a, b), bwd)


def div(a: DiffValue, b: DiffValue) -> DiffValue:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
    return from_op(a.data / b.data, (a, b), bwd)


def scale(a: DiffValue, c: float) -> DiffValue:
    c = float(c)
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)
    return from_op(a.data * c, (a,), bwd)


def neg(a: DiffValue) -> DiffValue:
    return scale(a, -1.0)


def matmul(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.data.shape} @ {b.data.shape}")
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)
    return from_op(a.data @ b.data, (a, b), bwd)


def conv2d(x: DiffValue, w: DiffValue, b: DiffValue | None = None) -> DiffValue:
    """Stride-1 zero-padded "same" convolution for odd kernel sizes."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ValueError("conv2d expects x:(B,C,H,W), w:(F,C,kh,kw)")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(f"channel mismatch {x.data.shape} vs {w.data.shape}")
    if w.data.shape[2] % 2 == 0 or w.data.shape[3] % 2 == 0:
        raise ValueError("conv2d kernels must be odd-sized")
    bias = b.data if b is not None else None
    out = kernels.conv2d_forward(x.data, w.data, bias)
    parents = (x, w) if b is None else (x, w, b)
    def bwd(g):
        gx, gw, gb = kernels.conv2d_backward(x.data, w.data, g)
        if x.requires_grad:
            x.accumulate_grad(gx)
        if w.requires_grad:
            w.accumulate_grad(gw)
        if b is not None and b.requires_grad:
            b.accumulate_grad(gb)
    return from_op(out, parents, bwd)


def relu(a: DiffValue) -> DiffValue:
    mask = a.data > 0
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)
    return from_op(np.where(mask, a.data, 0.0), (a,), bwd)


def sigmoid(a: DiffValue) -> DiffValue:
    s = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * s * (1.0 - s))
    return from_op(s, (a,), bwd)


def tanh(a: DiffValue) -> DiffValue:
    t = np.tanh(a.data)
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - t * t))
    return from_op(t, (a,), bwd)


def exp(a: DiffValue) -> DiffValue:
    e = np.exp(a.data)
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * e)
    return from_op(e, (a,), bwd)


def log(a: DiffValue) -> DiffValue:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)
    return from_op(np.log(a.data), (a,), bwd)


def softplus(a: DiffValue) -> DiffValue:
    """log(1 + exp(x)), computed stably."""
    out = np.logaddexp(0.0, a.data)
    s = 1.0 / (1.0 + np.exp(-np.clip(a.data, -500, 500)))
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)
    return from_op(out, (a,), bwd)


def softmax(a: DiffValue) -> DiffValue:
    """Softmax over the last axis."""
    if a.data.shape == () or a.data.shape[-1] == 0:
        raise ValueError("softmax needs a non-empty last axis")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    def bwd(g):
        if a.requires_grad:
            inner = (g * p).sum(axis=-1, keepdims=True)
            a.accumulate_grad(p * (g - inner))
    return from_op(p, (a,), bwd)


# ---------------------------------------------------------------------------
# reductions and structure ops
# ---------------------------------------------------------------------------

def mean(a: DiffValue, axis=None) -> DiffValue:
    count = a.data.size if axis is None else a.data.shape[axis]
    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.full_like(a.data, 1.0 / count) * g)
        else:
            a.accumulate_grad(np.expand_dims(g, axis) * np.ones_like(a.data) / count)
    return from_op(a.data.mean(axis=axis), (a,), bwd)


def total(a: DiffValue, axis=None) -> DiffValue:
    """Sum over all elements (or one axis)."""
    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            a.accumulate_grad(np.full_like(a.data, 1.0) * g)
        else:
            a.accumulate_grad(np.expand_dims(g, axis) * np.ones_like(a.data))
    return from_op(a.data.sum(axis=axis), (a,), bwd)


def weighted_sum(values: Sequence[DiffValue], weights: Sequence[DiffValue]) -> DiffValue:
    """sum_i w_i * v_i for scalar weights, differentiable in both."""
    if len(values) != len(weights):
        raise ValueError("values and weights must pair up")
    out = np.zeros_like(values[0].data)
    for v, w in zip(values, weights):
        if w.data.shape != ():
            raise ValueError("weighted_sum weights must be scalars")
        out = out + w.data * v.data
    def bwd(g):
        for v, w in zip(values, weights):
            if v.requires_grad:
                v.accumulate_grad(g * w.data)
            if w.requires_grad:
                w.accumulate_grad(np.asarray((g * v.data).sum()))
    return from_op(out, tuple(values) + tuple(weights), bwd)


def embed(table: DiffValue, ids) -> DiffValue:
    """Row lookup into an embedding table; grads scatter-add back."""
    ids = np.asarray(ids, dtype=np.int64)
    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids, g)
            table.accumulate_grad(gt)
    return from_op(table.data[ids], (table,), bwd)


def gather(a: DiffValue, idx) -> DiffValue:
    """out[i] = a[i, idx[i]] for a 2-d input (per-row index select)."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.data.shape[0])
    def bwd(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.add.at(ga, (rows, idx), g)
            a.accumulate_grad(ga)
    return from_op(a.data[rows, idx], (a,), bwd)


def concat(values: Sequence[DiffValue], axis: int = -1) -> DiffValue:
    sizes = [v.data.shape[axis] for v in values]
    def bwd(g):
        start = 0
        for v, s in zip(values, sizes):
            if v.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + s)
                v.accumulate_grad(g[tuple(sl)])
            start += s
    return from_op(np.concatenate([v.data for v in values], axis=axis),
                   tuple(values), bwd)


def reshape(a: DiffValue, shape) -> DiffValue:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))
    return from_op(a.data.reshape(shape), (a,), bwd)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def cross_entropy(logits: DiffValue, targets, smoothing: float = 0.0) -> DiffValue:
    """Mean negative log-likelihood of integer targets under the logits.

    logits: (B,V) or (V,); targets: (B,) ints or a single int. With
    smoothing, targets become (1-s)*onehot + s/V.
    """
    ld = logits.data
    squeeze = ld.ndim == 1
    if squeeze:
        ld = ld[None, :]
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape[0] != ld.shape[0]:
        raise ValueError(f"targets {t.shape} do not match logits {logits.data.shape}")
    b, v = ld.shape
    soft = np.full((b, v), smoothing / v)
    soft[np.arange(b), t] += 1.0 - smoothing
    zmax = ld.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(ld - zmax).sum(axis=-1, keepdims=True)) + zmax
    logp = ld - lse
    nll = -(soft * logp).sum(axis=-1).mean()
    def bwd(g):
        if logits.requires_grad:
            grad = (np.exp(logp) - soft) * (float(g) / b)
            logits.accumulate_grad(grad[0] if squeeze else grad)
    return from_op(np.asarray(nll), (logits,), bwd)


def mse(a: DiffValue, b: DiffValue) -> DiffValue:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mse shape mismatch {a.data.shape} vs {b.data.shape}")
    d = a.data - b.data
    n = d.size
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * 2.0 * d / n)
        if b.requires_grad:
            b.accumulate_grad(-g * 2.0 * d / n)
    return from_op(np.asarray((d * d).mean()), (a, b), bwd)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], DiffValue], params: Sequence[DiffValue],
               step: float = 1e-4, max_coords: int = 10_000,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between analytic grads of f() and central differences.

    Central differences with the given step; relative error denominator is
    max(|analytic|, |numeric|, 1e-8). Above `max_coords` total coordinates,
    a random sample of coordinates is checked instead.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if len(coords) > max_coords:
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = rng.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(k)] for k in pick]

    worst = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + step
        hi = float(f().data)
        flat[j] = orig - step
        lo = float(f().data)
        flat[j] = orig
        fd = (hi - lo) / (2.0 * step)
        an = float(analytic[i].reshape(-1)[j])
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        worst = max(worst, err)
    return worst
