"""Physics-guided diffusion enhancement for underwater images."""

__version__ = "0.1.0"

from .physics import (
    AmbientLight,
    AttenuationParams,
    PhysicsError,
    TransmissionMap,
    degrade,
    restore,
    transmission,
)
from .schedule import (
    DiffusedState,
    NoiseSchedule,
    ScheduleError,
    build_schedule,
    ddim_mean,
    nonmarkov_mean,
    posterior_mean_from_start,
    posterior_params,
    q_sample,
)
from .networks import (
    AmbientNet,
    DenoisingUNet,
    ModelBundle,
    PhysNetConfig,
    TransmissionNet,
    UNetConfig,
    phi_transform,
    physical_restore,
    predict_noise,
)
from .sampler import (
    EnhanceResult,
    SamplerPlan,
    enhance,
    plan_subsequence,
    shift,
    superpose,
)
from .training import TrainConfig, TrainingDivergedError, train_loop, training_step

__all__ = [
    "AmbientLight",
    "AmbientNet",
    "AttenuationParams",
    "DenoisingUNet",
    "DiffusedState",
    "EnhanceResult",
    "ModelBundle",
    "NoiseSchedule",
    "PhysNetConfig",
    "PhysicsError",
    "SamplerPlan",
    "ScheduleError",
    "TrainConfig",
    "TrainingDivergedError",
    "TransmissionMap",
    "TransmissionNet",
    "UNetConfig",
    "build_schedule",
    "ddim_mean",
    "degrade",
    "enhance",
    "nonmarkov_mean",
    "phi_transform",
    "physical_restore",
    "plan_subsequence",
    "posterior_mean_from_start",
    "posterior_params",
    "predict_noise",
    "q_sample",
    "restore",
    "shift",
    "superpose",
    "train_loop",
    "training_step",
    "transmission",
]
