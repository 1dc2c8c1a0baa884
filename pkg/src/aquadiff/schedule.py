"""Noise schedule and closed-form diffusion mathematics.

Owns every coefficient of the forward corruption chain and the closed-form
expressions built from them: the marginal at step t, the Markovian posterior
mean/variance, and the deterministic implicit-update mean used for
accelerated sampling.  Timesteps follow the 1-based convention t = 1..T with
the cumulative retention product extended by alpha_bar(0) = 1 so that the
t=1 and t_prev=0 edge cases are total.

All schedule arrays are float64.  The tensor-valued operations accept either
numpy arrays or torch tensors and return the same kind; per-element timestep
vectors broadcast over the leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NoiseSchedule",
    "DiffusedState",
    "ScheduleError",
    "build_schedule",
    "q_sample",
    "posterior_params",
    "posterior_mean_from_start",
    "nonmarkov_mean",
    "ddim_mean",
]


class ScheduleError(ValueError):
    """Invalid schedule construction or timestep index."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance increments and every derived diffusion coefficient.

    beta[i], alpha[i], alpha_bar[i] correspond to timestep t = i + 1.
    posterior_variance[i] is the reverse-chain variance at t = i + 1 (zero at
    t = 1 because alpha_bar(0) = 1).
    """

    timesteps: int
    kind: str
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_variance: np.ndarray

    def alpha_bar_at(self, t):
        """Cumulative retention product for t in [0, T]; alpha_bar(0) = 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.timesteps):
            raise ScheduleError(f"timestep {t} outside [0, {self.timesteps}]")
        extended = np.concatenate([[1.0], self.alpha_bar])
        out = extended[t]
        return float(out) if out.ndim == 0 else out

    def alpha_at(self, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.timesteps):
            raise ScheduleError(f"timestep {t} outside [1, {self.timesteps}]")
        out = self.alpha[t - 1]
        return float(out) if out.ndim == 0 else out

    def config(self) -> dict:
        return {
            "timesteps": self.timesteps,
            "kind": self.kind,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


@dataclass(frozen=True)
class DiffusedState:
    """A noisy tensor together with the timestep it sits at."""

    value: object
    t: object  # int or per-batch integer vector in [0, T]


def build_schedule(timesteps: int, kind: str = "linear",
                   beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Construct the variance schedule and all derived coefficient arrays."""
    if timesteps < 1:
        raise ScheduleError(f"timesteps must be >= 1, got {timesteps}")
    if kind != "linear":
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_variance = (1.0 - alpha_bar_prev) * (1.0 - alpha) / (1.0 - alpha_bar)
    return NoiseSchedule(
        timesteps=timesteps,
        kind=kind,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        posterior_variance=posterior_variance,
    )


def _coef(values, like):
    """Shape a per-batch coefficient so it broadcasts against `like`.

    `values` is a scalar or (B,) float64 array; the result is a scalar for
    scalar input, otherwise an array/tensor of shape (B, 1, ..., 1) matching
    the kind (numpy vs torch), dtype, and device of `like`.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return float(values)
    shape = (values.shape[0],) + (1,) * (like.ndim - 1)
    values = values.reshape(shape)
    if type(like).__module__.startswith("torch"):
        import torch

        return torch.as_tensor(values, dtype=like.dtype, device=like.device)
    return values.astype(like.dtype, copy=False)


def _check_shapes(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ScheduleError(f"{what}: shape {tuple(a.shape)} vs {tuple(b.shape)}")


def q_sample(x0, t, noise, schedule: NoiseSchedule) -> DiffusedState:
    """Sample the forward marginal: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * noise."""
    _check_shapes(x0, noise, "q_sample noise")
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.timesteps):
        raise ScheduleError(f"q_sample timestep {t} outside [1, {schedule.timesteps}]")
    ab = schedule.alpha_bar_at(t)
    value = _coef(np.sqrt(ab), x0) * x0 + _coef(np.sqrt(1.0 - np.asarray(ab)), x0) * noise
    return DiffusedState(value=value, t=t)


def posterior_params(xt: DiffusedState, predicted_noise, schedule: NoiseSchedule):
    """Reverse-chain Gaussian parameters at xt.t, from the predicted noise.

    mean = (x_t - ((1 - a_t) / sqrt(1 - ab_t)) * z) / sqrt(a_t)
    variance = (1 - ab_{t-1}) * (1 - a_t) / (1 - ab_t)

    The variance is a scalar for scalar t, else a broadcastable coefficient.
    """
    t = xt.t
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.timesteps):
        raise ScheduleError(f"posterior timestep {t} outside [1, {schedule.timesteps}]")
    _check_shapes(xt.value, predicted_noise, "posterior noise")
    a = schedule.alpha_at(t)
    ab = schedule.alpha_bar_at(t)
    a_np, ab_np = np.asarray(a), np.asarray(ab)
    mean = (xt.value - _coef((1.0 - a_np) / np.sqrt(1.0 - ab_np), xt.value) * predicted_noise) \
        / _coef(np.sqrt(a_np), xt.value)
    var = schedule.posterior_variance[t_arr - 1]
    variance = float(var) if var.ndim == 0 else var
    return mean, variance


def posterior_mean_from_start(x0, xt: DiffusedState, schedule: NoiseSchedule):
    """Posterior mean in its two-term (x0, x_t) form.

    mean = sqrt(ab_{t-1}) * (1 - a_t) / (1 - ab_t) * x0
         + sqrt(a_t) * (1 - ab_{t-1}) / (1 - ab_t) * x_t
    """
    t = xt.t
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.timesteps):
        raise ScheduleError(f"posterior timestep {t} outside [1, {schedule.timesteps}]")
    _check_shapes(x0, xt.value, "posterior start")
    a = np.asarray(schedule.alpha_at(t))
    ab = np.asarray(schedule.alpha_bar_at(t))
    ab_prev = np.asarray(schedule.alpha_bar_at(t_arr - 1))
    c0 = np.sqrt(ab_prev) * (1.0 - a) / (1.0 - ab)
    ct = np.sqrt(a) * (1.0 - ab_prev) / (1.0 - ab)
    return _coef(c0, x0) * x0 + _coef(ct, x0) * xt.value


def nonmarkov_mean(x0, noise, t, lambda_sq, schedule: NoiseSchedule):
    """General non-Markovian reverse mean with free variance parameter.

    mean = sqrt(ab_{t-1}) * x0 + sqrt(1 - ab_{t-1} - lambda_sq) * noise.
    lambda_sq = 0 gives the deterministic implicit mean; lambda_sq equal to
    the posterior variance reproduces the Markovian posterior mean.
    """
    t_arr = np.asarray(t)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.timesteps):
        raise ScheduleError(f"timestep {t} outside [1, {schedule.timesteps}]")
    _check_shapes(x0, noise, "nonmarkov noise")
    ab_prev = np.asarray(schedule.alpha_bar_at(t_arr - 1))
    lam = np.asarray(lambda_sq, dtype=np.float64)
    spread = 1.0 - ab_prev - lam
    if np.any(spread < -1e-12):
        raise ScheduleError("lambda_sq exceeds the available variance 1 - alpha_bar(t-1)")
    spread = np.maximum(spread, 0.0)
    return _coef(np.sqrt(ab_prev), x0) * x0 + _coef(np.sqrt(spread), x0) * noise


def ddim_mean(xt: DiffusedState, predicted_noise, t_prev, schedule: NoiseSchedule):
    """Deterministic implicit update mean from level xt.t to level t_prev.

    mean = sqrt(ab_{t_prev}) * (x_t - sqrt(1 - ab_t) * z) / sqrt(ab_t)
         + sqrt(1 - ab_{t_prev}) * z

    t_prev may be any level strictly below xt.t (0 recovers the signal
    estimate), which is what sub-sequence sampling relies on.
    """
    t = xt.t
    t_arr = np.asarray(t)
    tp_arr = np.asarray(t_prev)
    if np.any(t_arr < 1) or np.any(t_arr > schedule.timesteps):
        raise ScheduleError(f"timestep {t} outside [1, {schedule.timesteps}]")
    if np.any(tp_arr < 0) or np.any(tp_arr >= t_arr):
        raise ScheduleError(f"t_prev {t_prev} must satisfy 0 <= t_prev < t = {t}")
    _check_shapes(xt.value, predicted_noise, "ddim noise")
    ab = np.asarray(schedule.alpha_bar_at(t))
    ab_prev = np.asarray(schedule.alpha_bar_at(t_prev))
    x0_est = (xt.value - _coef(np.sqrt(1.0 - ab), xt.value) * predicted_noise) \
        / _coef(np.sqrt(ab), xt.value)
    return _coef(np.sqrt(ab_prev), xt.value) * x0_est \
        + _coef(np.sqrt(1.0 - ab_prev), xt.value) * predicted_noise
