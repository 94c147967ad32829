"""Dense float64 tensors with reverse-mode automatic differentiation.

Desk-scale engine: numpy storage, one closure per recorded op holding the
local gradient rule, and backprop in reverse topological order. Exactly the
primitives the model needs -- elementwise arithmetic with numpy broadcasting,
2-D matmul, row gather/scatter, segment reductions, and a few fused losses.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "GradCheckError",
    "concat_rows",
    "cosine_distance",
    "cross_entropy",
    "elu",
    "gather_rows",
    "grad_check",
    "layer_norm",
    "leaky_relu",
    "segment_softmax",
    "segment_sum",
    "tanh",
]


class GradCheckError(RuntimeError):
    """Raised when a gradient check cannot produce a finite comparison."""


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """A float64 array plus the bookkeeping to backprop through it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._backward_done = False

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _from_op(data: np.ndarray, parents: tuple, backward_fn) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward_fn = backward_fn
        return out

    def _accum(self, g: np.ndarray) -> None:
        # accumulation is out-of-place, so aliasing the incoming array is safe
        self.grad = g if self.grad is None else self.grad + g

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- backprop -----------------------------------------------------------

    def backward(self) -> None:
        """Backprop from a scalar output through the recorded graph.

        Visits nodes in exact reverse topological order. A second call on the
        same output without re-running the forward pass is rejected.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        if self._backward_done:
            raise RuntimeError("backward() already ran on this output; re-run the forward pass")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        for node in topo:
            if node._parents:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
        self._backward_done = True

    # -- elementwise arithmetic --------------------------------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other):
        a, b = self, Tensor._coerce(other)
        data = a.data + b.data

        def back(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._from_op(data, (a, b), back)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def back(g):
            a._accum(-g)

        return Tensor._from_op(-a.data, (a,), back)

    def __sub__(self, other):
        return self + (-Tensor._coerce(other))

    def __rsub__(self, other):
        return Tensor._coerce(other) + (-self)

    def __mul__(self, other):
        a, b = self, Tensor._coerce(other)
        data = a.data * b.data

        def back(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._from_op(data, (a, b), back)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, Tensor._coerce(other)
        data = a.data / b.data

        def back(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._from_op(data, (a, b), back)

    def __matmul__(self, other):
        a, b = self, Tensor._coerce(other)
        if a.data.shape[-1] != b.data.shape[0]:
            raise ValueError(f"matmul: inner dimensions disagree {a.data.shape} @ {b.data.shape}")
        data = a.data @ b.data

        def back(g):
            if a.requires_grad:
                if b.data.ndim == 1:
                    a._accum(np.outer(g, b.data) if a.data.ndim == 2 else g * b.data)
                else:
                    a._accum(np.atleast_1d(g) @ b.data.T if a.data.ndim == 1 else g @ b.data.T)
            if b.requires_grad:
                if a.data.ndim == 1:
                    b._accum(np.outer(a.data, g) if b.data.ndim == 2 else g * a.data)
                else:
                    b._accum(a.data.T @ g)

        return Tensor._from_op(data, (a, b), back)

    def pow_scalar(self, p: float) -> "Tensor":
        a = self
        data = a.data**p

        def back(g):
            a._accum(g * p * a.data ** (p - 1.0))

        return Tensor._from_op(data, (a,), back)

    def sqrt(self) -> "Tensor":
        a = self
        data = np.sqrt(a.data)

        def back(g):
            a._accum(g * 0.5 / np.sqrt(a.data))

        return Tensor._from_op(data, (a,), back)

    def exp(self) -> "Tensor":
        a = self
        data = np.exp(a.data)

        def back(g):
            a._accum(g * data)

        return Tensor._from_op(data, (a,), back)

    def log(self) -> "Tensor":
        a = self
        data = np.log(a.data)

        def back(g):
            a._accum(g / a.data)

        return Tensor._from_op(data, (a,), back)

    # -- reductions and shape ops ------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        data = a.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is None:
                a._accum(np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a._accum(np.broadcast_to(gg, a.data.shape).copy())

        return Tensor._from_op(data, (a,), back)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, shape) -> "Tensor":
        a = self
        data = a.data.reshape(shape)

        def back(g):
            a._accum(g.reshape(a.data.shape))

        return Tensor._from_op(data, (a,), back)


# -- activations ------------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    # subgradient at exactly 0 is the slope
    mask = np.where(x.data > 0.0, 1.0, slope)
    data = x.data * mask

    def back(g):
        x._accum(g * mask)

    return Tensor._from_op(data, (x,), back)


def elu(x: Tensor, alpha: float = 1.0) -> Tensor:
    neg = alpha * (np.exp(np.minimum(x.data, 0.0)) - 1.0)
    data = np.where(x.data > 0.0, x.data, neg)

    def back(g):
        x._accum(g * np.where(x.data > 0.0, 1.0, neg + alpha))

    return Tensor._from_op(data, (x,), back)


def tanh(x: Tensor) -> Tensor:
    data = np.tanh(x.data)

    def back(g):
        x._accum(g * (1.0 - data * data))

    return Tensor._from_op(data, (x,), back)


# -- structural ops ---------------------------------------------------------


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows (or scalar entries of a 1-D tensor) by integer index."""
    idx = np.asarray(idx, dtype=np.int64)
    data = x.data[idx]

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x._accum(gx)

    return Tensor._from_op(data, (x,), back)


def concat_rows(tensors: list) -> Tensor:
    """Stack along axis 0."""
    data = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.data.shape[0] for t in tensors])

    def back(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                t._accum(g[lo:hi])

    return Tensor._from_op(data, tuple(tensors), back)


def _segments_sorted(segments: np.ndarray) -> bool:
    return segments.size == 0 or bool(np.all(segments[1:] >= segments[:-1]))


def segment_sum(x: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``num_segments`` buckets given per-row ids."""
    segments = np.asarray(segments, dtype=np.int64)
    out_shape = (num_segments,) + x.data.shape[1:]
    if _segments_sorted(segments) and segments.size:
        data = np.zeros(out_shape)
        present, starts = np.unique(segments, return_index=True)
        data[present] = np.add.reduceat(x.data, starts, axis=0)
    else:
        data = np.zeros(out_shape)
        np.add.at(data, segments, x.data)

    def back(g):
        x._accum(g[segments])

    return Tensor._from_op(data, (x,), back)


def segment_softmax(logits: Tensor, segments: np.ndarray, num_segments: int) -> Tensor:
    """Softmax within each segment, stabilized by per-segment max subtraction.

    Empty input produces empty output. Every entry must carry a segment id.
    """
    segments = np.asarray(segments, dtype=np.int64)
    if logits.data.ndim != 1 or segments.shape != logits.data.shape:
        raise ValueError("segment_softmax expects 1-D logits with one segment id per entry")
    if logits.data.size == 0:
        return Tensor._from_op(np.zeros(0), (logits,), lambda g: logits._accum(np.zeros(0)))

    seg_max = np.full(num_segments, -np.inf)
    np.maximum.at(seg_max, segments, logits.data)
    shifted = np.exp(logits.data - seg_max[segments])
    denom = np.zeros(num_segments)
    np.add.at(denom, segments, shifted)
    y = shifted / denom[segments]

    def back(g):
        dot = np.zeros(num_segments)
        np.add.at(dot, segments, g * y)
        logits._accum(y * (g - dot[segments]))

    return Tensor._from_op(y, (logits,), back)


# -- normalization and fused losses ----------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise layer norm with learnable gain/bias; variance uses 1/d."""
    if eps <= 0.0:
        raise ValueError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    mu = x.sum(axis=-1, keepdims=True) * (1.0 / d)
    xc = x - mu
    var = (xc * xc).sum(axis=-1, keepdims=True) * (1.0 / d)
    inv = (var + eps).pow_scalar(-0.5)
    return xc * inv * gain + bias


def cosine_distance(v: Tensor, w: Tensor) -> Tensor:
    """1 - cos(v, w) for 1-D vectors; degenerate norms give constant 1."""
    nv = float(np.linalg.norm(v.data))
    nw = float(np.linalg.norm(w.data))
    if nv < 1e-12 or nw < 1e-12:
        return Tensor(1.0)
    dot = (v * w).sum()
    norm_v = (v * v).sum().sqrt()
    norm_w = (w * w).sum().sqrt()
    return 1.0 - dot / (norm_v * norm_w)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label], fused via log-sum-exp for stability."""
    z = logits.data
    if z.ndim != 1:
        raise ValueError("cross_entropy expects 1-D logits")
    n = z.shape[0]
    if not (0 <= label < n):
        raise IndexError(f"label {label} out of range for {n} classes")
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    data = np.asarray(lse - z[label])

    def back(g):
        p = np.exp(z - lse)
        p[label] -= 1.0
        logits._accum(float(g) * p)

    return Tensor._from_op(data, (logits,), back)


# -- gradient checking ------------------------------------------------------


def grad_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central finite differences.

    ``f`` maps a Tensor to a scalar Tensor and must be deterministic; it is
    re-run with perturbed copies of ``x`` for every coordinate.
    """
    x0 = Tensor(np.array(x.data, copy=True), requires_grad=True)
    out = f(x0)
    out.backward()
    g_ad = np.zeros_like(x0.data) if x0.grad is None else np.asarray(x0.grad, dtype=np.float64)
    if not np.all(np.isfinite(g_ad)):
        raise GradCheckError("autodiff gradient is not finite")

    flat = x.data.reshape(-1)
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        up = np.array(flat, copy=True)
        up[i] += step
        dn = np.array(flat, copy=True)
        dn[i] -= step
        hi = float(f(Tensor(up.reshape(x.data.shape))).data)
        lo = float(f(Tensor(dn.reshape(x.data.shape))).data)
        g_fd[i] = (hi - lo) / (2.0 * step)
    if not np.all(np.isfinite(g_fd)):
        raise GradCheckError("finite-difference gradient is not finite")

    ga = g_ad.reshape(-1)
    denom = np.maximum(1e-8, np.abs(ga) + np.abs(g_fd))
    return float(np.max(np.abs(ga - g_fd) / denom)) if flat.size else 0.0
