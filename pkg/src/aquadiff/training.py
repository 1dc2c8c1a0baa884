"""Joint training of the denoiser and the physical parameter nets.

Each step draws one timestep and one unit-Gaussian noise tensor per batch
item, diffuses the degraded image ``x0`` and its clean reference ``y0``
with the *same* noise, and minimizes one fused scalar::

    w_theta * MSE(z, eps_hat)                   noise prediction
  + w_at    * MSE(y0, restore(x0))              physical restoration
  + w_phi   * MSE(y_t, phi(x0, x_t))            distribution transformation

with a single Adam step over all parameters, followed by an EMA update.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .data import PairedDataset, resize, to_tensor
from .networks import (
    AmbientNet,
    DenoisingUNet,
    ModelBundle,
    TransmissionNet,
    physical_restore,
    predict_noise,
)
from .schedule import NoiseSchedule, _coef, q_sample


class TrainingDivergedError(RuntimeError):
    """Raised when a step produces a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters."""

    batch_size: int = 4
    learning_rate: float = 2e-5
    weight_decay: float = 0.0
    ema_decay: float = 0.999
    max_iterations: int = 10000
    loss_weight_theta: float = 1.0
    loss_weight_at: float = 1.0
    loss_weight_phi: float = 1.0
    resolution: int = 128
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 1000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self) -> None:
        if self.batch_size <= 0 or self.max_iterations < 0:
            raise ValueError("batch_size must be positive, max_iterations >= 0")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive, weight_decay >= 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")
        for w in (self.loss_weight_theta, self.loss_weight_at, self.loss_weight_phi):
            if w < 0:
                raise ValueError("loss weights must be >= 0")

    @classmethod
    def desk(cls, max_iterations: int = 3000, seed: int = 0) -> "TrainConfig":
        """CPU-scale preset for 32x32 experiments."""
        return cls(
            batch_size=4,
            learning_rate=4e-4,
            max_iterations=max_iterations,
            resolution=32,
            seed=seed,
            log_every=100,
            checkpoint_every=1000,
        )


@dataclass(frozen=True)
class StepResult:
    step: int
    loss_theta: float
    loss_at: float
    loss_phi: float
    total: float
    seconds: float


@dataclass
class TrainState:
    """Everything mutated by the loop: bundle, optimizer and RNGs."""

    bundle: ModelBundle
    optimizer: torch.optim.Optimizer
    noise_rng: torch.Generator
    index_rng: np.random.Generator
    config: TrainConfig
    history: list[StepResult] = field(default_factory=list)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def loss_theta(
    x0: torch.Tensor,
    z: torch.Tensor,
    t: np.ndarray,
    unet: DenoisingUNet,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """MSE between the added noise and the denoiser's prediction."""
    xt = q_sample(x0, t, z, schedule)
    t_tensor = torch.as_tensor(np.asarray(t, dtype=np.float64), device=x0.device)
    eps_hat = predict_noise(unet, xt.value, x0, t_tensor.to(x0.dtype))
    return torch.mean((eps_hat - z) ** 2)


def loss_at(
    x0: torch.Tensor,
    y0: torch.Tensor,
    anet: AmbientNet,
    tnet: TransmissionNet,
) -> torch.Tensor:
    """MSE between the clean reference and the physical restoration of x0."""
    return torch.mean((physical_restore(anet, tnet, x0) - y0) ** 2)


def loss_phi(
    x0: torch.Tensor,
    y0: torch.Tensor,
    z: torch.Tensor,
    t: np.ndarray,
    unet: DenoisingUNet,
    anet: AmbientNet,
    tnet: TransmissionNet,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """MSE between the diffused reference and the physics-guided estimate.

    ``x0`` and ``y0`` are diffused with the same noise tensor ``z``.
    """
    _, lphi = _theta_phi_terms(x0, y0, z, t, unet, anet, tnet, schedule)
    return lphi


def _theta_phi_terms(
    x0: torch.Tensor,
    y0: torch.Tensor,
    z: torch.Tensor,
    t: np.ndarray,
    unet: DenoisingUNet,
    anet: AmbientNet,
    tnet: TransmissionNet,
    schedule: NoiseSchedule,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Shared forward pass for the theta and phi objectives."""
    xt = q_sample(x0, t, z, schedule)
    yt = q_sample(y0, t, z, schedule)
    t_tensor = torch.as_tensor(np.asarray(t, dtype=np.float64), device=x0.device)
    eps_hat = predict_noise(unet, xt.value, x0, t_tensor.to(x0.dtype))
    ltheta = torch.mean((eps_hat - z) ** 2)
    restored = physical_restore(anet, tnet, x0)
    ab = schedule.alpha_bar_at(np.asarray(t))
    y_estimate = (
        _coef(np.sqrt(ab), x0) * restored
        + _coef(np.sqrt(1.0 - np.asarray(ab)), x0) * eps_hat
    )
    lphi = torch.mean((y_estimate - yt.value) ** 2)
    return ltheta, lphi


def fused_loss(
    x0: torch.Tensor,
    y0: torch.Tensor,
    z: torch.Tensor,
    t: np.ndarray,
    bundle: ModelBundle,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted sum of the three objectives, sharing forward passes."""
    ltheta, lphi = _theta_phi_terms(
        x0, y0, z, t, bundle.unet, bundle.anet, bundle.tnet, bundle.schedule
    )
    lat = loss_at(x0, y0, bundle.anet, bundle.tnet)
    w_theta, w_at, w_phi = weights
    total = w_theta * ltheta + w_at * lat + w_phi * lphi
    parts = {
        "loss_theta": float(ltheta.detach()),
        "loss_at": float(lat.detach()),
        "loss_phi": float(lphi.detach()),
    }
    return total, parts


# ---------------------------------------------------------------------------
# stepping
# ---------------------------------------------------------------------------


def draw_step_noise(
    shape: tuple[int, ...],
    timesteps: int,
    rng: torch.Generator,
    dtype: torch.dtype = torch.float32,
) -> tuple[np.ndarray, torch.Tensor]:
    """Per-item uniform timesteps in [1, T] and one shared-noise tensor."""
    t = torch.randint(1, timesteps + 1, (shape[0],), generator=rng).numpy()
    z = torch.randn(shape, generator=rng, dtype=dtype)
    return t, z


def training_step(
    state: TrainState, x0: torch.Tensor, y0: torch.Tensor
) -> StepResult:
    """One fused optimization step plus the EMA update."""
    cfg = state.config
    bundle = state.bundle
    began = time.perf_counter()
    t, z = draw_step_noise(
        tuple(x0.shape), bundle.schedule.timesteps, state.noise_rng, x0.dtype
    )
    z = z.to(x0.device)
    weights = (cfg.loss_weight_theta, cfg.loss_weight_at, cfg.loss_weight_phi)
    total, parts = fused_loss(x0, y0, z, t, bundle, weights)
    if not torch.isfinite(total):
        raise TrainingDivergedError(
            f"non-finite loss at step {bundle.step}: {parts}"
        )
    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    bundle.update_ema()
    bundle.step += 1
    result = StepResult(
        step=bundle.step,
        loss_theta=parts["loss_theta"],
        loss_at=parts["loss_at"],
        loss_phi=parts["loss_phi"],
        total=float(total.detach()),
        seconds=time.perf_counter() - began,
    )
    state.history.append(result)
    return result


# ---------------------------------------------------------------------------
# optimizer snapshots
# ---------------------------------------------------------------------------


def export_optimizer_state(
    optimizer: torch.optim.Optimizer, bundle: ModelBundle
) -> dict[str, Any]:
    """Optimizer moments keyed by parameter name, as plain arrays."""
    names = [name for name, _ in bundle.named_parameters()]
    raw = optimizer.state_dict()
    groups = []
    for group in raw["param_groups"]:
        group = dict(group)
        group.pop("params", None)
        groups.append(group)
    state: dict[str, Any] = {}
    for index, slots in raw["state"].items():
        state[names[index]] = {
            "step": int(float(slots["step"])),
            "exp_avg": slots["exp_avg"].detach().cpu().numpy(),
            "exp_avg_sq": slots["exp_avg_sq"].detach().cpu().numpy(),
        }
    return {"param_groups": groups, "state": state}


def restore_optimizer_state(
    optimizer: torch.optim.Optimizer,
    bundle: ModelBundle,
    payload: dict[str, Any],
) -> None:
    """Inverse of :func:`export_optimizer_state`."""
    names = [name for name, _ in bundle.named_parameters()]
    index_of = {name: i for i, name in enumerate(names)}
    groups = []
    for stored in payload["param_groups"]:
        group = dict(stored)
        if "betas" in group:
            group["betas"] = tuple(group["betas"])
        group["params"] = list(range(len(names)))
        groups.append(group)
    state = {}
    for name, slots in payload["state"].items():
        state[index_of[name]] = {
            "step": torch.tensor(float(slots["step"])),
            "exp_avg": torch.as_tensor(np.asarray(slots["exp_avg"])),
            "exp_avg_sq": torch.as_tensor(np.asarray(slots["exp_avg_sq"])),
        }
    optimizer.load_state_dict({"state": state, "param_groups": groups})


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def preload_pairs(
    dataset: PairedDataset, resolution: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode the whole dataset into two float32 stacks, resizing as needed."""
    raws, refs = [], []
    for index in range(len(dataset)):
        raw, ref = dataset.load_pair(index)
        if raw.shape[:2] != (resolution, resolution):
            raw = resize(raw, resolution)
        if ref.shape[:2] != (resolution, resolution):
            ref = resize(ref, resolution)
        raws.append(to_tensor(raw))
        refs.append(to_tensor(ref))
    return torch.stack(raws), torch.stack(refs)


def make_state(
    bundle: ModelBundle,
    config: TrainConfig,
    optimizer_state: dict[str, Any] | None = None,
) -> TrainState:
    optimizer = torch.optim.Adam(
        bundle.parameters(),
        lr=config.learning_rate,
        betas=(config.adam_beta1, config.adam_beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    if optimizer_state is not None:
        restore_optimizer_state(optimizer, bundle, optimizer_state)
    noise_rng = torch.Generator()
    noise_rng.manual_seed(config.seed)
    return TrainState(
        bundle=bundle,
        optimizer=optimizer,
        noise_rng=noise_rng,
        index_rng=np.random.default_rng(config.seed),
        config=config,
    )


def train_loop(
    bundle: ModelBundle,
    dataset: PairedDataset,
    config: TrainConfig,
    log_path: str | Path | None = None,
    checkpoint_path: str | Path | None = None,
    optimizer_state: dict[str, Any] | None = None,
    echo: bool = False,
) -> TrainState:
    """Run (or continue) training until ``config.max_iterations`` steps.

    Writes a ``step,loss_theta,loss_at,loss_phi,seconds`` CSV when a log
    path is given and periodic checkpoints when a checkpoint path is
    given; both also fire on the final step.
    """
    raws, refs = preload_pairs(dataset, config.resolution)
    state = make_state(bundle, config, optimizer_state)
    n = raws.shape[0]

    log_file = None
    writer = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        fresh = not log_path.exists() or bundle.step == 0
        log_file = open(log_path, "w" if fresh else "a", newline="")
        writer = csv.writer(log_file)
        if fresh:
            writer.writerow(["step", "loss_theta", "loss_at", "loss_phi", "seconds"])

    try:
        while bundle.step < config.max_iterations:
            indices = state.index_rng.integers(0, n, size=config.batch_size)
            x0 = raws[indices]
            y0 = refs[indices]
            result = training_step(state, x0, y0)
            final = bundle.step >= config.max_iterations
            if writer and (bundle.step % config.log_every == 0 or final):
                writer.writerow(
                    [
                        result.step,
                        f"{result.loss_theta:.8g}",
                        f"{result.loss_at:.8g}",
                        f"{result.loss_phi:.8g}",
                        f"{result.seconds:.6f}",
                    ]
                )
                log_file.flush()
            if echo and (bundle.step % config.log_every == 0 or final):
                print(
                    f"step {result.step}: theta {result.loss_theta:.5f} "
                    f"at {result.loss_at:.5f} phi {result.loss_phi:.5f}"
                )
            if checkpoint_path is not None and (
                bundle.step % config.checkpoint_every == 0 or final
            ):
                save_checkpoint(
                    checkpoint_path,
                    bundle,
                    optimizer_state=export_optimizer_state(state.optimizer, bundle),
                )
    finally:
        if log_file is not None:
            log_file.close()
    return state
