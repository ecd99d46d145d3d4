"""Central finite-difference oracle for analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .engine import backward
from .tensor import Tensor


def numeric_gradient(fn: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` at ``point``, coordinate by coordinate."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = point.data
    out = np.zeros_like(base)
    flat = out.reshape(-1)
    # fn may take inner gradients, so the probe points must record lineage
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        orig = bumped[i]
        bumped[i] = orig + step
        hi = _scalar(fn(Tensor(bumped.reshape(base.shape), requires_grad=True)))
        bumped[i] = orig - step
        lo = _scalar(fn(Tensor(bumped.reshape(base.shape), requires_grad=True)))
        flat[i] = (hi - lo) / (2.0 * step)
    return out


def _scalar(t: Tensor) -> float:
    v = float(np.asarray(t.data).reshape(-1)[0]) if t.size == 1 else None
    if v is None:
        raise ValueError(f"fn must return a scalar, got shape {t.shape}")
    if not np.isfinite(v):
        raise ValueError("fn returned a non-finite value")
    return v


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``max |analytic - numeric| / (|numeric| + 1e-10)`` over coordinates."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-10)))


def finite_difference_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-5) -> float:
    """Max relative error between the autodiff gradient and central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64),
               requires_grad=True)
    y = fn(x)
    _scalar(y)
    analytic = backward(y, [x])[x].data
    numeric = numeric_gradient(fn, x, step)
    return relative_error(analytic, numeric)
