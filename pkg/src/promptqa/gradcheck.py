"""Central-difference gradient checking for the autodiff core."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError
from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    eps: float
    per_input: list[float] = field(default_factory=list)
    analytic: list[np.ndarray] = field(default_factory=list, repr=False)
    numeric: list[np.ndarray] = field(default_factory=list, repr=False)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``.

    The norm-wise form keeps near-zero gradient entries (whose finite
    differences are dominated by rounding) from dominating the verdict.
    """
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return diff
    return float(diff / scale)


def _evaluate(f: Callable[[], Tensor]) -> float:
    out = f()
    value = float(np.asarray(out.data).sum())
    if not np.isfinite(value):
        raise NumericError(f"gradient check: function value is not finite ({value})")
    return value


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f`` against central differences.

    ``f`` is called with no arguments when ``x`` is a sequence (the tensors
    are captured by closure, as with model parameters) and with ``x`` itself
    when a single tensor is given. ``f`` must be deterministic.
    """
    single = isinstance(x, Tensor)
    inputs = [x] if single else list(x)
    call = (lambda: f(inputs[0])) if single else f

    saved_flags = [t.requires_grad for t in inputs]
    saved_grads = [t.grad for t in inputs]
    try:
        for t in inputs:
            t.requires_grad = True
            t.grad = None
        out = call()
        if out.data.size != 1:
            raise NumericError(f"gradient check needs a scalar function, got shape {out.shape}")
        if not np.isfinite(out.data).all():
            raise NumericError("gradient check: function value is not finite")
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

        numeric = []
        for t in inputs:
            flat = t.data.reshape(-1)
            num = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                up = _evaluate(call)
                flat[i] = orig - eps
                down = _evaluate(call)
                flat[i] = orig
                num[i] = (up - down) / (2.0 * eps)
            numeric.append(num.reshape(t.shape))
    finally:
        for t, flag, g in zip(inputs, saved_flags, saved_grads):
            t.requires_grad = flag
            t.grad = g

    per_input = [relative_error(a, n) for a, n in zip(analytic, numeric)]
    worst = max(per_input, default=0.0)
    return GradCheckReport(worst, worst < tol, tol, eps, per_input, analytic, numeric)
