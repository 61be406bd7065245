"""Finite-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from seqlidar.errors import ContractError, EvaluationError
from seqlidar.tensor import Tensor, backward, no_grad


def _scalar(value):
    value = value.data if isinstance(value, Tensor) else np.asarray(value)
    if value.size != 1:
        raise ContractError(f"function must return a scalar, got shape {value.shape}")
    out = float(value.reshape(()))
    if not np.isfinite(out):
        raise EvaluationError("function value is not finite")
    return out


def numeric_gradient(f, x, step=1e-5, kink_tol=1e-2):
    """Central differences of ``f`` at ``x`` plus a mask of kinked coordinates.

    A coordinate is flagged non-differentiable when the one-sided forward and
    backward quotients disagree by more than ``kink_tol * max(1, |central|)``.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    flat = base.reshape(-1)
    grad = np.zeros_like(flat)
    kinked = np.zeros(flat.shape, dtype=bool)
    with no_grad():
        f0 = _scalar(f(Tensor(base)))
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = _scalar(f(Tensor(base)))
            flat[i] = orig - step
            fm = _scalar(f(Tensor(base)))
            flat[i] = orig
            central = (fp - fm) / (2 * step)
            forward, backward_q = (fp - f0) / step, (f0 - fm) / step
            grad[i] = central
            kinked[i] = abs(forward - backward_q) > kink_tol * max(1.0, abs(central))
    return grad.reshape(base.shape), kinked.reshape(base.shape)


def analytic_gradient(f, x):
    """Gradient of scalar ``f`` at ``x`` from one tape pass (float64)."""
    xt = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
    y = f(xt)
    _scalar(y)
    backward(y)
    if xt.grad is None:
        return np.zeros_like(xt.data)
    return xt.grad


def grad_check(f, x, step=1e-5, kink_tol=1e-2):
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|).

    Coordinates where ``f`` has a kink (two-sided disagreement test) are
    skipped; finite differences are meaningless there.
    """
    analytic = analytic_gradient(f, x)
    numeric, kinked = numeric_gradient(f, x, step, kink_tol)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    err = err[~kinked]
    return float(err.max()) if err.size else 0.0
