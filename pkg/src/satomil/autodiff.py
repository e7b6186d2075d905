"""Reverse-mode autodiff over dense float64 matrices.

A small dynamic-tape engine: each differentiable op stores its parent
tensors and a backward closure on the output tensor, and ``backward``
replays the closures in exact reverse recording order, accumulating
gradients additively into shared parents. Everything is 2-D (rows, cols)
and float64; the only broadcasting supported is adding a 1 x cols row
vector (a bias) to an n x cols matrix. Any op that produces a NaN or Inf
raises immediately -- non-finite values are treated as corrupt state.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "no_grad",
    "backward",
    "matmul",
    "linear",
    "add",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "tanh",
    "sum_all",
    "mean_rows",
    "max_rows",
    "transpose",
    "slice_rows",
    "take_rows",
    "concat_rows",
    "layer_norm",
    "masked_softmax",
    "bce_with_logits",
    "softmax_cross_entropy",
    "grad_check",
    "zero_grads",
]


class ShapeError(ValueError):
    """Operand shapes violate an op contract."""


class NonFiniteError(ArithmeticError):
    """A tensor picked up a NaN or Inf."""


_ORDER = itertools.count()
_GRAD_ENABLED = True

SIGMOID_CLAMP = 40.0  # pre-activation clamp; sigma(40) is 1.0 - 4e-18


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr, what="tensor"):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains NaN or Inf")


class Tensor:
    """A 2-D float64 matrix, optionally carrying a gradient buffer."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "_order")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D (rows, cols); got shape {arr.shape}")
        _check_finite(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._grad = None  # allocated on first use
        self._parents = tuple(_parents)
        self._backward = _backward
        self._order = next(_ORDER)

    @property
    def grad(self):
        if self._grad is None and self.requires_grad:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.data.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        if self._grad is not None:
            self._grad[...] = 0.0

    @property
    def T(self):
        return transpose(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def _from_op(out_data, parents, backward_fn, what):
    # Tensor.__init__ runs the finite check; `what` names the op in tracebacks
    try:
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            return Tensor(out_data, requires_grad=True, _parents=parents,
                          _backward=backward_fn)
        return Tensor(out_data)
    except NonFiniteError as exc:
        raise NonFiniteError(f"{what}: {exc}") from None


def backward(root):
    """Propagate d(root)/d(tensor) into .grad of every reachable tensor.

    root must be 1x1. Repeated calls accumulate (grads are not zeroed
    here). Visits nodes in exact reverse recording order, so two runs on
    identical graphs produce bit-identical gradients.
    """
    if not isinstance(root, Tensor) or root.data.shape != (1, 1):
        raise ValueError("backward root must be a scalar (1x1) tensor")
    if not root.requires_grad:
        return
    nodes, seen, stack = [], set(), [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._order, reverse=True)

    pending = {id(root): np.ones((1, 1))}

    def accumulate(t, g):
        if not t.requires_grad:
            return
        got = pending.get(id(t))
        pending[id(t)] = g.copy() if got is None else got + g

    for t in nodes:
        g = pending.get(id(t))
        if g is None or t._backward is None:
            continue
        t._backward(g, accumulate)
    for t in nodes:
        g = pending.get(id(t))
        if g is not None and t.requires_grad:
            if t._grad is None:
                t._grad = g  # pending arrays are freshly owned, safe to adopt
            else:
                t._grad += g


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# ops


def matmul(a, b):
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bw(g, acc):
        acc(a, g @ b.data.T)
        acc(b, a.data.T @ g)

    return _from_op(out, (a, b), bw, "matmul output")


def linear(x, w, b):
    """Fused affine map x @ w + b with a 1 x cols bias row."""
    if x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"linear inner dims differ: {x.data.shape} x {w.data.shape}")
    if b.data.shape != (1, w.data.shape[1]):
        raise ShapeError(f"linear bias must be 1 x {w.data.shape[1]}, got {b.data.shape}")
    out = x.data @ w.data + b.data

    def bw(g, acc):
        acc(x, g @ w.data.T)
        acc(w, x.data.T @ g)
        acc(b, g.sum(axis=0, keepdims=True))

    return _from_op(out, (x, w, b), bw, "linear output")


def add(a, b):
    """Elementwise add; b may also be a 1 x cols bias row."""
    if a.data.shape == b.data.shape:
        broadcast = False
    elif b.data.shape == (1, a.data.shape[1]):
        broadcast = True
    else:
        raise ShapeError(f"add shapes {a.data.shape} and {b.data.shape} incompatible")
    out = a.data + b.data

    def bw(g, acc):
        acc(a, g)
        acc(b, g.sum(axis=0, keepdims=True) if broadcast else g)

    return _from_op(out, (a, b), bw, "add output")


def mul(a, b):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes {a.data.shape} and {b.data.shape} differ")
    out = a.data * b.data

    def bw(g, acc):
        acc(a, g * b.data)
        acc(b, g * a.data)

    return _from_op(out, (a, b), bw, "mul output")


def scale(a, c):
    c = float(c)
    out = a.data * c

    def bw(g, acc):
        acc(a, g * c)

    return _from_op(out, (a,), bw, "scale output")


def relu(a):
    out = np.maximum(a.data, 0.0)
    pos = a.data > 0.0

    def bw(g, acc):
        acc(a, g * pos)

    return _from_op(out, (a,), bw, "relu output")


def _sigmoid_stable(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(a):
    z = np.clip(a.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    out = _sigmoid_stable(z)

    def bw(g, acc):
        acc(a, g * out * (1.0 - out))

    return _from_op(out, (a,), bw, "sigmoid output")


def tanh(a):
    out = np.tanh(a.data)

    def bw(g, acc):
        acc(a, g * (1.0 - out * out))

    return _from_op(out, (a,), bw, "tanh output")


def sum_all(a):
    out = np.array([[a.data.sum()]])

    def bw(g, acc):
        acc(a, np.full_like(a.data, g[0, 0]))

    return _from_op(out, (a,), bw, "sum output")


def mean_rows(a):
    n = a.data.shape[0]
    out = a.data.mean(axis=0, keepdims=True)

    def bw(g, acc):
        acc(a, np.repeat(g, n, axis=0) / n)

    return _from_op(out, (a,), bw, "mean_rows output")


def max_rows(a):
    """Columnwise max over rows; ties route gradient to the first row."""
    idx = a.data.argmax(axis=0)
    out = a.data.max(axis=0, keepdims=True)

    def bw(g, acc):
        dz = np.zeros_like(a.data)
        dz[idx, np.arange(a.data.shape[1])] = g[0]
        acc(a, dz)

    return _from_op(out, (a,), bw, "max_rows output")


def transpose(a):
    out = a.data.T.copy()

    def bw(g, acc):
        acc(a, g.T)

    return _from_op(out, (a,), bw, "transpose output")


def slice_rows(a, start, stop):
    rows = a.data.shape[0]
    if not (0 <= start < stop <= rows):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {rows} rows")
    out = a.data[start:stop].copy()

    def bw(g, acc):
        dz = np.zeros_like(a.data)
        dz[start:stop] = g
        acc(a, dz)

    return _from_op(out, (a,), bw, "slice_rows output")


def take_rows(a, indices):
    """Gather rows by index; duplicate indices accumulate gradient."""
    idx = np.asarray(indices, dtype=np.intp).ravel()
    if idx.size == 0:
        raise ShapeError("take_rows needs at least one index")
    if idx.min() < 0 or idx.max() >= a.data.shape[0]:
        raise ShapeError(f"take_rows index out of range for {a.data.shape[0]} rows")
    out = a.data[idx]

    def bw(g, acc):
        dz = np.zeros_like(a.data)
        np.add.at(dz, idx, g)
        acc(a, dz)

    return _from_op(out, (a,), bw, "take_rows output")


def concat_rows(parts):
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_rows needs at least one tensor")
    cols = parts[0].data.shape[1]
    if any(p.data.shape[1] != cols for p in parts):
        raise ShapeError("concat_rows column counts differ")
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def bw(g, acc):
        for p, r0, r1 in zip(parts, offsets[:-1], offsets[1:]):
            acc(p, g[r0:r1])

    return _from_op(out, tuple(parts), bw, "concat_rows output")


def layer_norm(x, gain, bias, eps=1e-5):
    """Per-row normalization (population variance + eps), then affine."""
    d = x.data.shape[1]
    if gain.data.shape != (1, d) or bias.data.shape != (1, d):
        raise ShapeError("layer_norm gain/bias must be 1 x cols rows")
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gain.data + bias.data

    def bw(g, acc):
        acc(gain, (g * xhat).sum(axis=0, keepdims=True))
        acc(bias, g.sum(axis=0, keepdims=True))
        dxhat = g * gain.data
        acc(x, inv * (dxhat
                      - dxhat.mean(axis=1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)))

    return _from_op(out, (x, gain, bias), bw, "layer_norm output")


def masked_softmax(logits, mask, mode="pre"):
    """Row softmax under a binary mask.

    mode="pre": masked entries get weight exactly 0 and each row's allowed
    entries renormalize to sum 1 (stabilized by row-max over allowed
    entries). mode="post": plain softmax over the full row, then multiplied
    by the mask, so rows are sub-stochastic. The mask is a constant; no
    gradient flows through it.
    """
    if mode not in ("pre", "post"):
        raise ValueError(f"unknown masked_softmax mode {mode!r}")
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if m.shape != logits.data.shape:
        raise ShapeError(f"mask shape {m.shape} != logits shape {logits.data.shape}")
    allowed = m > 0.5
    bad = np.flatnonzero(~allowed.any(axis=1))
    if bad.size:
        raise ValueError(f"mask row {bad[0]} has no allowed entries")

    if mode == "pre":
        rowmax = np.max(np.where(allowed, logits.data, -np.inf), axis=1, keepdims=True)
        # inner where keeps exp() off masked entries; outer where pins them to 0
        e = np.where(allowed, np.exp(np.where(allowed, logits.data - rowmax, 0.0)), 0.0)
        p = e / e.sum(axis=1, keepdims=True)
        out = p

        def bw(g, acc):
            acc(logits, p * (g - (g * p).sum(axis=1, keepdims=True)))

    else:
        rowmax = logits.data.max(axis=1, keepdims=True)
        e = np.exp(logits.data - rowmax)
        p = e / e.sum(axis=1, keepdims=True)
        keep = allowed.astype(np.float64)
        out = p * keep

        def bw(g, acc):
            dp = g * keep
            acc(logits, p * (dp - (dp * p).sum(axis=1, keepdims=True)))

    return _from_op(out, (logits,), bw, "masked_softmax output")


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy against 0/1 targets, from logits.

    Fused stable form max(z,0) - z*t + log(1 + exp(-|z|)); the caller sums.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.data.shape:
        raise ShapeError(f"targets shape {t.shape} != logits shape {logits.data.shape}")
    z = logits.data
    out = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))

    def bw(g, acc):
        acc(logits, g * (_sigmoid_stable(z) - t))

    return _from_op(out, (logits,), bw, "bce output")


def softmax_cross_entropy(scores, labels):
    """Summed cross-entropy of row softmaxes against 0-based class indices."""
    y = np.asarray(labels, dtype=np.intp).ravel()
    n, k = scores.data.shape
    if y.shape[0] != n:
        raise ShapeError(f"{y.shape[0]} labels for {n} score rows")
    if y.min(initial=0) < 0 or y.max(initial=0) >= k:
        raise ValueError("class index out of range")
    s = scores.data
    rowmax = s.max(axis=1, keepdims=True)
    lse = rowmax[:, 0] + np.log(np.exp(s - rowmax).sum(axis=1))
    out = np.array([[float((lse - s[np.arange(n), y]).sum())]])

    def bw(g, acc):
        p = np.exp(s - rowmax)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), y] -= 1.0
        acc(scores, g[0, 0] * p)

    return _from_op(out, (scores,), bw, "cross_entropy output")


def grad_check(f, params, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    f rebuilds and returns a scalar loss tensor from the current values of
    params each time it is called. Relative error per entry is
    |analytic - numeric| / max(1, |analytic|, |numeric|). Zeroes the
    parameter grads as a side effect.
    """
    params = list(params)
    zero_grads(params)
    out = f()
    if out.data.shape != (1, 1):
        raise ValueError("grad_check target must return a scalar (1x1) tensor")
    backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]

    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            gflat = ga.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + step
                hi = f().item()
                flat[i] = keep - step
                lo = f().item()
                flat[i] = keep
                numeric = (hi - lo) / (2.0 * step)
                denom = max(1.0, abs(gflat[i]), abs(numeric))
                worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
