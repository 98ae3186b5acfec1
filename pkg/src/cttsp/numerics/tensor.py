"""Dense float64 tensors with tape-based reverse-mode gradients.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = ops.bce_loss(model(x), y)
    tape.backward(loss)

Outside a tape every op is a plain numpy computation, which is what the
evaluation passes rely on.
"""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: Optional[str] = None):
        self.value = np.array(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # Operator sugar; the ops module holds the actual primitives.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Record:
    __slots__ = ("output", "inputs", "backward")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward: BackwardFn):
        self.output = output
        self.inputs = inputs
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered log of primitive applications, replayed backwards once."""

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise RuntimeError("tape already replayed; record a new one")
        if loss.value.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        self._consumed = True
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for rec in reversed(self.records):
            g = rec.output.grad
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64)
                else:
                    inp.grad += gi
            # Intermediates are never read again.
            rec.output.grad = None
        self.records.clear()


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def make_output(op: str, value: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap a primitive's forward value and register its backward on the active tape."""
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{op}: produced non-finite values")
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.value = value
    out.name = None
    out.requires_grad = needs_grad
    out.grad = None
    if needs_grad:
        tape.records.append(_Record(out, inputs, backward))
    return out
