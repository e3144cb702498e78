"""Minimal dense-tensor kernel with reverse-mode automatic differentiation.

Tensors wrap numpy arrays (float32 by default, float64 for high-precision
equivalence checks) and record a tape of parent links so that calling
``backward()`` on a scalar loss populates ``.grad`` on every reachable
tensor with ``requires_grad=True``.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "matmul",
    "add",
    "mul",
    "softmax",
    "max_over_sequence",
    "cross_entropy_masked",
    "gelu",
    "layer_norm",
    "embedding",
    "dropout",
    "argmax",
]


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    """A dense n-dimensional array participating in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    # -- tape machinery ----------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        """Reverse-mode sweep from a scalar tensor.

        Populates ``grad`` on every tensor with ``requires_grad`` reachable
        from ``self``.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_grad(*tensors):
    return any(t.requires_grad or t._parents for t in tensors)


def _make(data, parents, backward):
    out = Tensor(data)
    if _needs_grad(*parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = False
    return out


def _unbroadcast(g, shape):
    """Sum-reduce a broadcast gradient back to the original shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives --------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, [a, b], backward)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad or a._parents:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, [a, b], backward)


def matmul(a, b):
    """Matrix product with numpy-style batch broadcasting on leading axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad or a._parents:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad or b._parents:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, [a, b], backward)


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, [a], backward)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    out_data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _make(out_data, [a], backward)


def slice_last(a, start, stop):
    """Slice along the last axis; gradient zero-pads back."""
    a = _as_tensor(a)
    out_data = a.data[..., start:stop]

    def backward(g):
        full = np.zeros_like(a.data)
        full[..., start:stop] = g
        a._accumulate(full)

    return _make(out_data, [a], backward)


def sum_all(a):
    a = _as_tensor(a)
    out_data = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.dtype))

    return _make(out_data, [a], backward)


def softmax(x, axis=-1):
    """Numerically stabilized softmax along ``axis``."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - dot))

    return _make(y, [x], backward)


def max_over_sequence(x, axis=1):
    """Element-wise maximum over one axis.

    Gradient routes to the arg-max position only; ties break to the lowest
    index so results are deterministic.
    """
    x = _as_tensor(x)
    if x.data.shape[axis] < 1:
        raise ShapeError("max_over_sequence requires a nonempty axis")
    idx = x.data.argmax(axis=axis)  # numpy argmax already picks the first max
    out_data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        x._accumulate(full)

    return _make(out_data, [x], backward)


def gelu(x):
    """GELU activation (tanh approximation), with matching analytic gradient."""
    x = _as_tensor(x)
    c = np.sqrt(2.0 / np.pi).astype(x.dtype) if x.dtype == np.float32 else np.sqrt(2.0 / np.pi)
    inner = c * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    y = 0.5 * x.data * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        dinner = c * (1.0 + 3 * 0.044715 * x.data**2)
        dy = 0.5 * (1.0 + t) + 0.5 * x.data * sech2 * dinner
        x._accumulate((g * dy).astype(x.dtype))

    return _make(y.astype(x.dtype), [x], backward)


def layer_norm(x, gain, bias, eps=1e-5):
    """Layer normalization over the last axis with learned gain and bias."""
    x = _as_tensor(x)
    gain = _as_tensor(gain, like=x)
    bias = _as_tensor(bias, like=x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data
    n = x.data.shape[-1]

    def backward(g):
        if gain.requires_grad or gain._parents:
            gain._accumulate(_unbroadcast(g * xhat, gain.data.shape))
        if bias.requires_grad or bias._parents:
            bias._accumulate(_unbroadcast(g, bias.data.shape))
        if x.requires_grad or x._parents:
            gx_hat = g * gain.data
            term1 = gx_hat
            term2 = gx_hat.mean(axis=-1, keepdims=True)
            term3 = xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((inv * (term1 - term2 - term3)).astype(x.dtype))

    return _make(y.astype(x.dtype), [x, gain, bias], backward)


def embedding(table, ids):
    """Row lookup into an embedding table; gradient scatter-adds rows."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"token id out of range [0, {table.data.shape[0]})")
    out_data = table.data[ids]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _make(out_data, [table], backward)


def dropout(x, rate, seed):
    """Train-mode dropout with an explicit per-call seed stream."""
    x = _as_tensor(x)
    if rate <= 0.0:
        return x
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.data.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    out_data = x.data * keep

    def backward(g):
        x._accumulate(g * keep)

    return _make(out_data, [x], backward)


def cross_entropy_masked(logits, targets, mask):
    """Mean negative log-likelihood over positions where ``mask`` is nonzero.

    ``logits`` has shape [..., V]; ``targets`` and ``mask`` share the leading
    shape. Padding (mask=0) positions contribute nothing.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=logits.dtype)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(f"targets shape {targets.shape} does not match logits {logits.data.shape}")
    if mask.shape != targets.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match targets {targets.shape}")
    v = logits.data.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= v):
        raise ShapeError(f"target id out of range [0, {v})")
    total = mask.sum()
    if total <= 0:
        raise ShapeError("cross_entropy_masked: all positions are masked out")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = (nll * mask).sum() / total

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        grad = (p - onehot) * (mask / total)[..., None]
        logits._accumulate((g * grad).astype(logits.dtype))

    return _make(np.asarray(loss, dtype=logits.dtype), [logits], backward)


def argmax(x, axis=-1):
    """Arg-max indices; non-differentiable by design (no tape participation)."""
    x = _as_tensor(x)
    return x.data.argmax(axis=axis)
