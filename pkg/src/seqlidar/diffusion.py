"""Continuous-time DDPM with the alpha-cosine schedule and epsilon prediction.

``alpha(t) = cos(pi t / 2)`` and ``sigma(t) = sin(pi t / 2)`` for
``t`` in [0, 1].  Sampling walks a uniform grid from t = 1 to t = 0, turning
each noise prediction into a clean estimate (clipped to the data range)
and drawing from the Gaussian posterior q(x_s | x_t, x).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from seqlidar.errors import DimensionError, OrderingError, RangeError, SamplerDivergenceError
from seqlidar.functional import mse
from seqlidar.tensor import Tensor, no_grad

T_FLOOR = 1e-4
DEFAULT_STEPS = 256


@dataclass(frozen=True)
class Schedule:
    """The fixed alpha-cosine schedule (the only supported kind)."""

    kind: str = "alpha-cosine"

    def __call__(self, t):
        return schedule_at(t)


@dataclass
class DiffusionState:
    x_t: np.ndarray
    t: np.ndarray


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = DEFAULT_STEPS
    seed: int = 0
    t_floor: float = T_FLOOR
    clip_x_hat: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise RangeError(f"sampler needs at least one step, got {self.steps}")


def schedule_at(t):
    """Return ``(alpha_t, sigma_t)``; ``t`` may be a float or an array."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or np.any(np.isnan(t_arr)):
        raise RangeError(f"t must lie in [0, 1], got {t}")
    angle = 0.5 * math.pi * t_arr
    alpha, sigma = np.cos(angle), np.sin(angle)
    if alpha.ndim == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


def _broadcast_time(value, like):
    """Reshape a per-batch coefficient so it broadcasts against ``like``."""
    value = np.asarray(value, dtype=np.float64)
    if value.ndim == 0:
        return value
    return value.reshape(value.shape + (1,) * (np.ndim(like) - value.ndim))


def forward_diffuse(x, t, eps):
    """Corrupt ``x`` to time ``t``: ``alpha_t x + sigma_t eps``."""
    x, eps = np.asarray(x), np.asarray(eps)
    if x.shape != eps.shape:
        raise DimensionError(f"x {x.shape} and eps {eps.shape} differ in shape")
    alpha, sigma = schedule_at(t)
    alpha, sigma = _broadcast_time(alpha, x), _broadcast_time(sigma, x)
    out = alpha * x + sigma * eps
    return out.astype(np.result_type(x.dtype, eps.dtype), copy=False)


def transition_params(s, t):
    """Return ``(alpha_{t|s}, sigma^2_{t|s})`` for 0 <= s < t <= 1.

    ``s`` and ``t`` may be floats or equally shaped arrays (element-wise).
    """
    if not np.all(np.asarray(s) < np.asarray(t)):
        raise OrderingError(f"transition needs s < t, got s={s}, t={t}")
    a_s, s_s = schedule_at(s)
    a_t, s_t = schedule_at(t)
    a_ts = a_t / a_s
    var_ts = s_t * s_t - a_ts * a_ts * s_s * s_s
    return a_ts, var_ts


def eps_to_x(x_t, eps_hat, t, t_floor=T_FLOOR):
    """Invert the corruption given a noise estimate: ``(x_t - sigma_t eps) / alpha_t``.

    ``alpha_t`` is clamped below at ``t_floor`` so t = 1 stays finite.
    """
    x_t, eps_hat = np.asarray(x_t), np.asarray(eps_hat)
    alpha, sigma = schedule_at(t)
    alpha = np.maximum(alpha, t_floor)
    alpha, sigma = _broadcast_time(alpha, x_t), _broadcast_time(sigma, x_t)
    out = (x_t - sigma * eps_hat) / alpha
    return out.astype(np.result_type(x_t.dtype, eps_hat.dtype), copy=False)


def posterior_coefficients(s, t):
    """Coefficients ``(c_xt, c_x, std)`` of q(x_s | x_t, x)."""
    if not s < t:
        raise OrderingError(f"posterior step needs s < t, got s={s}, t={t}")
    a_s, s_s = schedule_at(s)
    _, s_t = schedule_at(t)
    if s_t <= 0.0:
        raise RangeError("posterior step needs sigma_t > 0")
    a_ts, var_ts = transition_params(s, t)
    var_s, var_t = s_s * s_s, s_t * s_t
    c_xt = a_ts * var_s / var_t
    c_x = a_s * var_ts / var_t
    std = math.sqrt(max(var_ts * var_s / var_t, 0.0))
    return c_xt, c_x, std


def posterior_step(x_t, x_hat, s, t, noise):
    """Draw x_s from the Gaussian posterior given the clean estimate ``x_hat``."""
    x_t, x_hat = np.asarray(x_t), np.asarray(x_hat)
    c_xt, c_x, std = posterior_coefficients(s, t)
    if s == 0.0:
        return x_hat.copy()
    out = c_xt * x_t + c_x * x_hat + std * np.asarray(noise)
    return out.astype(x_t.dtype, copy=False)


def _as_array(value):
    return value.data if isinstance(value, Tensor) else np.asarray(value)


def train_loss(model, x, conditions, rng, t_floor=T_FLOOR):
    """Epsilon-prediction MSE for one batch.

    Args:
        model: Callable ``model(x_t, t, conditions) -> Tensor`` with the
            shape of ``x`` ([B, F, 2, H, W]).
        x: Clean normalized sequences, shape [B, F, 2, H, W].
        conditions: A batched :class:`~seqlidar.bundle.ConditionBundle`.
        rng: ``numpy.random.Generator`` supplying t and the noise.

    Returns:
        Scalar loss tensor (differentiable w.r.t. the model parameters).
    """
    x = np.asarray(x)
    B = x.shape[0]
    t = rng.uniform(t_floor, 1.0 - t_floor, size=B)
    eps = rng.standard_normal(x.shape).astype(x.dtype)
    x_t = forward_diffuse(x, t, eps).astype(x.dtype)
    eps_hat = model(x_t, t, conditions)
    if tuple(eps_hat.shape) != eps.shape:
        raise DimensionError(f"model output {tuple(eps_hat.shape)} != noise shape {eps.shape}")
    if not isinstance(eps_hat, Tensor):
        eps_hat = Tensor(eps_hat)
    return mse(eps_hat, Tensor(eps, dtype=eps_hat.dtype))


def sample(model, conditions, cfg=SamplerConfig(), dtype=np.float32):
    """Generate a sequence (or batch of sequences) for the given conditions.

    The output shape follows ``conditions.sketch`` and is clipped to [-1, 1].
    With ``cfg.clip_x_hat`` (the default) every clean estimate is clipped to
    the data range as well: near t = 1 the inversion divides by
    ``max(alpha_t, t_floor)``, which amplifies small noise-prediction errors
    by up to ``1 / t_floor``.
    """
    batched = conditions.is_batched
    cond = conditions.batched()
    shape = cond.sketch.shape
    rng = np.random.default_rng(cfg.seed)
    x = rng.standard_normal(shape).astype(dtype)
    B = shape[0]
    steps = cfg.steps
    with no_grad():
        for i in range(steps, 0, -1):
            t, s = i / steps, (i - 1) / steps
            eps_hat = _as_array(model(x, np.full(B, t), cond)).astype(dtype, copy=False)
            x_hat = eps_to_x(x, eps_hat, t, cfg.t_floor)
            if cfg.clip_x_hat:
                x_hat = np.clip(x_hat, -1.0, 1.0)
            noise = rng.standard_normal(shape).astype(dtype) if i > 1 else np.zeros(shape, dtype)
            x = posterior_step(x, x_hat, s, t, noise).astype(dtype, copy=False)
            if not np.all(np.isfinite(x)):
                raise SamplerDivergenceError(steps - i)
    x = np.clip(x, -1.0, 1.0)
    return x if batched else x[0]
