import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture()
def tiny_bundle():
    """A minimal 16x16 model for structural and numerical tests."""
    from aquadiff.networks import ModelBundle, PhysNetConfig, UNetConfig
    from aquadiff.schedule import build_schedule

    schedule = build_schedule(50, beta_start=1e-4, beta_end=0.1)
    return ModelBundle.create(
        schedule, UNetConfig.tiny(), PhysNetConfig(), seed=7
    )
