"""Differentiable primitives over :class:`Tensor`.

Every primitive checks shapes, computes the forward value with numpy and
registers an exact analytic backward. Binary elementwise primitives follow
numpy broadcasting; their backward sums gradients back to operand shape.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, make_output

LEAKY_SLOPE = 0.01
PROB_EPS = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return make_output("add", a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return make_output("sub", a.value - b.value, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    """Hadamard product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("hadamard", a, b)
    av, bv = a.value, b.value
    return make_output("hadamard", av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


hadamard = mul


def scale(a, factor: float, shift: float = 0.0) -> Tensor:
    """``factor * a + shift`` for scalar constants."""
    a = as_tensor(a)
    return make_output("scale", a.value * factor + shift, (a,), lambda g: (g * factor,))


def scale_add(a, alpha: float, b, beta: float) -> Tensor:
    """``alpha * a + beta * b``; the constants are not differentiated."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("scale_add", a, b)
    return make_output("scale_add", alpha * a.value + beta * b.value, (a, b),
                       lambda g: (_unbroadcast(alpha * g, a.shape), _unbroadcast(beta * g, b.shape)))


def matmul(a, b) -> Tensor:
    """numpy ``matmul`` semantics, including stacked batches and 1-D operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    av = a.value[None, :] if a.ndim == 1 else a.value
    bv = b.value[:, None] if b.ndim == 1 else b.value
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(av, bv)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        g2 = g
        if b.ndim == 1:
            g2 = g2[..., None]
        if a.ndim == 1:
            g2 = g2[..., None, :]
        ga = np.matmul(g2, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g2)
        if a.ndim == 1:
            ga = ga[..., 0, :]
        if b.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    if b.ndim == 1:
        out = out[..., 0]
    if a.ndim == 1:
        out = out[..., 0, :] if b.ndim > 1 else out[..., 0]
    return make_output("matmul", out, (a, b), backward)


def dot(a, b) -> Tensor:
    """Inner product of two equal-length vectors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected equal-length vectors, got {a.shape} and {b.shape}")
    av, bv = a.value, b.value
    return make_output("dot", np.asarray(av @ bv), (a, b), lambda g: (g * bv, g * av))


def rowdot(a, b) -> Tensor:
    """Inner products along the last axis: ``sum(a * b, -1)``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("rowdot", a, b)
    av, bv = a.value, b.value

    def backward(g):
        g = g[..., None]
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return make_output("rowdot", np.einsum("...i,...i->...", av, bv), (a, b), backward)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_output("sum", np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return make_output("concat", out, ts, lambda g: np.split(g, sizes, axis=axis))


def reshape(a, shape: tuple) -> Tensor:
    a = as_tensor(a)
    orig = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {orig} to {shape}") from None
    return make_output("reshape", out, (a,), lambda g: (g.reshape(orig),))


def swapaxes(a, axis1: int = -1, axis2: int = -2) -> Tensor:
    a = as_tensor(a)
    return make_output("swapaxes", np.swapaxes(a.value, axis1, axis2), (a,),
                       lambda g: (np.swapaxes(g, axis1, axis2),))


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    return swapaxes(a, -1, -2)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.value)
    return make_output("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.value)
    return make_output("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    x = a.value
    d = np.where(x > 0, 1.0, slope)
    return make_output("leaky_relu", x * d, (a,), lambda g: (g * d,))


def softmax_masked(logits, mask=None, axis: int = -1) -> Tensor:
    """Softmax with excluded positions set to exactly zero.

    ``mask`` is boolean, True where the entry takes part, and broadcasts
    against ``logits``. Every softmax row needs at least one True entry.
    """
    logits = as_tensor(logits)
    x = logits.value
    if mask is None:
        keep = np.ones(x.shape, dtype=bool)
    else:
        try:
            keep = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        except ValueError:
            raise ShapeError(f"softmax_masked: mask shape {np.shape(mask)} does not match logits {x.shape}") from None
    if not np.all(keep.any(axis=axis)):
        raise ValueError("softmax_masked: a row is fully masked")
    shifted = np.where(keep, x, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_output("softmax_masked", y, (logits,), backward)


def take(a, index) -> Tensor:
    """Gather rows of ``a`` (embedding lookup); backward scatter-adds."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise IndexError(f"take: index out of range for {a.shape[0]} rows")
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape)
        np.add.at(grad, idx, g)
        return (grad,)

    return make_output("take", a.value[idx], (a,), backward)


def scatter_last(values, index, mask, size: int) -> Tensor:
    """Place ``values[..., r]`` at position ``index[..., r]`` of a zero ``(..., size)`` array.

    Entries with ``mask`` False are dropped. Unmasked indices must be
    distinct within each leading position.
    """
    values = as_tensor(values)
    idx = np.asarray(index, dtype=np.intp)
    keep = np.asarray(mask, dtype=bool)
    if idx.shape != values.shape or keep.shape != values.shape:
        raise ShapeError(f"scatter_last: values {values.shape}, index {idx.shape}, mask {keep.shape} differ")
    lead = np.nonzero(keep)
    target = lead[:-1] + (idx[lead],)
    out = np.zeros(values.shape[:-1] + (size,))
    out[target] = values.value[lead]

    def backward(g):
        grad = np.zeros(values.shape)
        grad[lead] = g[target]
        return (grad,)

    return make_output("scatter_last", out, (values,), backward)


def where(cond, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    c = np.asarray(cond, dtype=bool)
    return make_output("where", np.where(c, a.value, b.value), (a, b),
                       lambda g: (_unbroadcast(np.where(c, g, 0.0), a.shape),
                                  _unbroadcast(np.where(c, 0.0, g), b.shape)))


def dropout(x, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_output("dropout", x.value * keep, (x,), lambda g: (g * keep,))


def bce_loss(probs, targets) -> Tensor:
    """Summed binary cross-entropy with probabilities clamped to [1e-12, 1 - 1e-12]."""
    probs = as_tensor(probs)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != probs.shape:
        raise ShapeError(f"bce_loss: probabilities {probs.shape} vs targets {y.shape}")
    p = probs.value
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = -np.sum(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    inside = (p >= PROB_EPS) & (p <= 1.0 - PROB_EPS)

    def backward(g):
        return (g * np.where(inside, -y / pc + (1.0 - y) / (1.0 - pc), 0.0),)

    return make_output("bce_loss", np.asarray(loss), (probs,), backward)
