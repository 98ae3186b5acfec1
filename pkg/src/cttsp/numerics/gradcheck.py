"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckResult:
    passed: bool
    max_deviation: dict[str, float] = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.passed


def _scalar(out) -> float:
    value = float(out.value) if isinstance(out, Tensor) else float(out)
    if not np.isfinite(value):
        raise FloatingPointError("grad_check: forward produced a non-finite loss")
    return value


def grad_check(forward: Callable[[], Tensor], params: dict[str, Tensor], tol: float = 1e-4,
               step: float = 1e-5, atol: float = 1e-8) -> GradCheckResult:
    """Compare tape gradients of ``forward()`` with central differences.

    ``forward`` must be deterministic. The deviation of one entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|)``; entries whose
    absolute difference is below ``atol`` count as exact.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = forward()
    _scalar(loss)
    tape.backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}

    result = GradCheckResult(passed=True)
    for name, p in params.items():
        numeric = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = _scalar(forward())
            flat[i] = orig - step
            down = _scalar(forward())
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2.0 * step)
        diff = np.abs(analytic[name] - numeric)
        denom = np.maximum(np.abs(analytic[name]), np.abs(numeric))
        dev = np.where(diff < atol, 0.0, diff / np.where(denom > 0, denom, 1.0))
        worst = float(dev.max()) if dev.size else 0.0
        result.max_deviation[name] = worst
        if worst >= tol:
            result.passed = False
    return result
