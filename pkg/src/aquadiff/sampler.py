"""Accelerated dual-chain enhancement sampler.

Enhancement runs two diffusion chains conditioned on the degraded image
``x0``: an auxiliary chain ``x'`` started from pure noise, and the output
chain ``y'``.  Both descend a strictly increasing timestep sub-sequence in
reverse with deterministic implicit updates.  After each intermediate
update the output chain is superposed with the physics-guided estimate of
the freshly advanced auxiliary state and then distribution-shifted back to
the chain's own mean/variance.  The final step denoises ``y'`` to level 0.

A Markovian full-length reference mode (stochastic ancestral updates over
every timestep) exists solely for speedup benchmarking.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from .data import to_image, to_tensor
from .networks import (
    AmbientNet,
    DenoisingUNet,
    ModelBundle,
    TransmissionNet,
    phi_transform,
    predict_noise,
)
from .schedule import DiffusedState, NoiseSchedule, ddim_mean, posterior_params

SQRT_HALF = 1.0 / math.sqrt(2.0)
SHIFT_COEF = 1.0 - math.sqrt(2.0)


class SamplerError(RuntimeError):
    """Raised for invalid plans or non-finite intermediate states."""


@dataclass(frozen=True)
class SamplerPlan:
    """A strictly increasing sub-sequence of diffusion timesteps."""

    tau: tuple[int, ...]

    def __post_init__(self) -> None:
        if not self.tau:
            raise SamplerError("empty sampling plan")
        if self.tau[0] < 1:
            raise SamplerError("timesteps must start at 1 or later")
        if any(b <= a for a, b in zip(self.tau, self.tau[1:])):
            raise SamplerError("timesteps must be strictly increasing")

    @property
    def steps(self) -> int:
        return len(self.tau)


def plan_subsequence(timesteps: int, steps: int) -> SamplerPlan:
    """Uniformly interleaved sub-sequence: tau_i = floor((i-1)*T/S) + 1."""
    if steps < 1 or steps > timesteps:
        raise SamplerError(f"need 1 <= steps <= {timesteps}, got {steps}")
    tau = tuple((i * timesteps) // steps + 1 for i in range(steps))
    return SamplerPlan(tau=tau)


def superpose(theta_step: torch.Tensor, phi_out: torch.Tensor) -> torch.Tensor:
    """Elementwise sum of the two chain estimates."""
    if theta_step.shape != phi_out.shape:
        raise SamplerError(
            f"shape mismatch: {tuple(theta_step.shape)} vs {tuple(phi_out.shape)}"
        )
    return theta_step + phi_out


def shift(v: torch.Tensor, mu: torch.Tensor) -> torch.Tensor:
    """Map N(2*mu, 2*sigma^2) samples back to N(mu, sigma^2): v/sqrt(2) + (1-sqrt(2))*mu."""
    return v * SQRT_HALF + SHIFT_COEF * mu


@dataclass(frozen=True)
class EnhanceResult:
    """Output image plus per-step timing."""

    enhanced: np.ndarray
    step_seconds: tuple[float, ...]
    steps_used: int

    @property
    def total_seconds(self) -> float:
        return float(sum(self.step_seconds))


def _check_finite(value: torch.Tensor, step_index: int, t: int) -> None:
    if not torch.isfinite(value).all():
        raise SamplerError(f"non-finite state at step {step_index} (t={t})")


def _t_tensor(t: int, batch: int, like: torch.Tensor) -> torch.Tensor:
    return torch.full((batch,), float(t), dtype=like.dtype, device=like.device)


def enhance(
    x0: np.ndarray | torch.Tensor,
    bundle: ModelBundle,
    plan: SamplerPlan | None = None,
    schedule: NoiseSchedule | None = None,
    seed: int = 0,
    phi_time: str = "destination",
    use_ema: bool = True,
    mode: str = "implicit",
) -> EnhanceResult:
    """Enhance one degraded image.

    The only randomness is the initial auxiliary draw (and, in reference
    mode, the per-step ancestral noise), all from a generator seeded with
    ``seed`` — identical seeds give identical outputs.

    ``phi_time`` selects the level at which the physics-guided estimate is
    evaluated: ``"destination"`` (default) uses the level being produced;
    ``"source"`` uses the level being left.
    """
    schedule = schedule or bundle.schedule
    if schedule.config() != bundle.schedule.config():
        raise SamplerError("plan schedule differs from the bundle's schedule")
    if phi_time not in ("destination", "source"):
        raise SamplerError(f"unknown phi_time {phi_time!r}")
    if mode not in ("implicit", "reference"):
        raise SamplerError(f"unknown mode {mode!r}")
    if mode == "reference":
        plan = plan_subsequence(schedule.timesteps, schedule.timesteps)
    elif plan is None:
        plan = plan_subsequence(schedule.timesteps, min(25, schedule.timesteps))
    if plan.tau[-1] > schedule.timesteps:
        raise SamplerError(
            f"plan reaches t={plan.tau[-1]} beyond T={schedule.timesteps}"
        )
    stochastic = mode == "reference"

    if isinstance(x0, np.ndarray):
        cond = to_tensor(x0)[None]
    else:
        cond = x0.detach().clone()
        if cond.dim() == 3:
            cond = cond[None]
    if use_ema:
        unet, anet, tnet = bundle.ema_modules()
    else:
        unet, anet, tnet = bundle.unet, bundle.anet, bundle.tnet

    rng = torch.Generator()
    rng.manual_seed(seed)
    tau = plan.tau
    s = plan.steps
    batch = cond.shape[0]
    times: list[float] = []

    def predict(state: torch.Tensor, t: int) -> torch.Tensor:
        return predict_noise(unet, state, cond, _t_tensor(t, batch, cond))

    def advance(state: torch.Tensor, t: int, dest: int) -> torch.Tensor:
        """One deterministic (or, in reference mode, ancestral) update."""
        eps = predict(state, t)
        if stochastic and dest >= 1:
            mean, variance = posterior_params(DiffusedState(state, t), eps, schedule)
            noise = torch.randn(
                state.shape, generator=rng, dtype=state.dtype, device=state.device
            )
            return mean + math.sqrt(float(variance)) * noise
        return ddim_mean(DiffusedState(state, t), eps, dest, schedule)

    def phi_at(aux: torch.Tensor, source_t: int, dest_t: int) -> torch.Tensor:
        level = dest_t if phi_time == "destination" else source_t
        return phi_transform(
            cond, DiffusedState(aux, level), schedule, unet, anet, tnet
        )

    with torch.no_grad():
        aux = torch.randn(
            cond.shape, generator=rng, dtype=cond.dtype, device=cond.device
        )
        if s == 1:
            began = time.perf_counter()
            out = phi_at(aux, tau[0], tau[0])
            _check_finite(out, 0, tau[0])
            times.append(time.perf_counter() - began)
        else:
            began = time.perf_counter()
            aux = advance(aux, tau[s - 1], tau[s - 2])
            out = phi_at(aux, tau[s - 1], tau[s - 2])
            _check_finite(out, 0, tau[s - 1])
            times.append(time.perf_counter() - began)
            for i in range(s - 2, 0, -1):
                began = time.perf_counter()
                t, dest = tau[i], tau[i - 1]
                aux = advance(aux, t, dest)
                mu = advance(out, t, dest)
                estimate = phi_at(aux, t, dest)
                out = shift(superpose(mu, estimate), mu)
                _check_finite(out, s - 1 - i, t)
                times.append(time.perf_counter() - began)
        began = time.perf_counter()
        eps = predict(out, tau[0])
        out = ddim_mean(DiffusedState(out, tau[0]), eps, 0, schedule)
        _check_finite(out, s, tau[0])
        times.append(time.perf_counter() - began)

    enhanced = to_image(out[0].clamp(0.0, 1.0))
    return EnhanceResult(
        enhanced=enhanced, step_seconds=tuple(times), steps_used=s
    )


def benchmark_steps(
    x0: np.ndarray,
    bundle: ModelBundle,
    steps_list: list[int],
    repeats: int = 1,
    seed: int = 0,
) -> dict[int, float]:
    """Mean wall-time per configuration; S equal to T runs reference mode."""
    timesteps = bundle.schedule.timesteps
    results: dict[int, float] = {}
    for steps in steps_list:
        mode = "reference" if steps == timesteps else "implicit"
        plan = None if mode == "reference" else plan_subsequence(timesteps, steps)
        elapsed = []
        for r in range(repeats):
            began = time.perf_counter()
            enhance(x0, bundle, plan=plan, seed=seed + r, mode=mode)
            elapsed.append(time.perf_counter() - began)
        results[steps] = float(np.mean(elapsed))
    return results
