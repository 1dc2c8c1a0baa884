"""Checkpoint archive round trips."""

import zipfile

import numpy as np
import pytest
import torch

from aquadiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from aquadiff.networks import ModelBundle, UNetConfig
from aquadiff.schedule import build_schedule
from aquadiff.training import (
    TrainConfig,
    export_optimizer_state,
    make_state,
    restore_optimizer_state,
    training_step,
)


def assert_bundles_equal(a: ModelBundle, b: ModelBundle) -> None:
    pa, pb = dict(a.named_parameters()), dict(b.named_parameters())
    assert set(pa) == set(pb)
    for name in pa:
        assert torch.equal(pa[name], pb[name]), name
        assert torch.equal(a.ema[name], b.ema[name]), f"ema {name}"
    assert a.step == b.step
    assert a.ema_decay == b.ema_decay
    assert a.schedule.config() == b.schedule.config()
    assert a.unet_config == b.unet_config
    assert a.phys_config == b.phys_config


def test_roundtrip_exact(tmp_path, tiny_bundle):
    tiny_bundle.step = 123
    # push ema away from the live weights so both streams are exercised
    with torch.no_grad():
        for _, p in tiny_bundle.named_parameters():
            p.add_(0.25)
    path = save_checkpoint(tmp_path / "ckpt.zip", tiny_bundle)
    loaded, opt = load_checkpoint(path)
    assert opt is None
    assert_bundles_equal(tiny_bundle, loaded)


def test_roundtrip_with_optimizer(tmp_path, tiny_bundle):
    cfg = TrainConfig(
        batch_size=2, learning_rate=1e-3, max_iterations=3, resolution=16, seed=0
    )
    state = make_state(tiny_bundle, cfg)
    g = torch.Generator().manual_seed(0)
    x0 = torch.rand(2, 3, 16, 16, generator=g)
    y0 = torch.rand(2, 3, 16, 16, generator=g)
    for _ in range(3):
        training_step(state, x0, y0)
    snapshot = export_optimizer_state(state.optimizer, state.bundle)
    path = save_checkpoint(tmp_path / "c.zip", state.bundle, optimizer_state=snapshot)

    bundle, restored = load_checkpoint(path, load_optimizer=True)
    assert_bundles_equal(state.bundle, bundle)
    assert restored is not None
    assert set(restored["state"]) == set(snapshot["state"])
    for name, slots in snapshot["state"].items():
        assert restored["state"][name]["step"] == slots["step"]
        for key in ("exp_avg", "exp_avg_sq"):
            got = np.asarray(restored["state"][name][key])
            np.testing.assert_array_equal(got, np.asarray(slots[key]), err_msg=name)

    # restoring into a fresh optimizer must reproduce the next update exactly
    fresh = make_state(bundle, cfg)
    restore_optimizer_state(fresh.optimizer, bundle, restored)
    fresh.noise_rng.set_state(state.noise_rng.get_state())
    training_step(state, x0, y0)
    training_step(fresh, x0, y0)
    assert_bundles_equal(state.bundle, fresh.bundle)


def test_load_missing_file(tmp_path):
    with pytest.raises((CheckpointError, OSError)):
        load_checkpoint(tmp_path / "nope.zip")


def test_load_rejects_foreign_archive(tmp_path):
    path = tmp_path / "junk.zip"
    with zipfile.ZipFile(path, "w") as z:
        z.writestr("something.txt", "hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_load_rejects_wrong_format_tag(tmp_path, tiny_bundle):
    path = save_checkpoint(tmp_path / "c.zip", tiny_bundle)
    data = {}
    with zipfile.ZipFile(path) as z:
        for name in z.namelist():
            data[name] = z.read(name)
    data["format.json"] = b'{"format": "other-tool", "version": 1}'
    with zipfile.ZipFile(path, "w") as z:
        for name, blob in data.items():
            z.writestr(name, blob)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_preserves_custom_config(tmp_path):
    sched = build_schedule(20, beta_end=0.05)
    cfg = UNetConfig(
        input_resolution=16,
        base_channels=8,
        channel_multipliers=(1, 2),
        blocks_per_level=1,
        time_sinusoid_dim=8,
        time_embed_dim=16,
        attention_resolutions=(),
        bottleneck_attention=False,
        time_scale_shift=False,
    )
    bundle = ModelBundle.create(sched, cfg, ema_decay=0.5, seed=3)
    path = save_checkpoint(tmp_path / "c.zip", bundle)
    loaded, _ = load_checkpoint(path)
    assert loaded.unet_config == cfg
    assert loaded.ema_decay == 0.5
    assert loaded.schedule.timesteps == 20
    x = torch.rand(1, 6, 16, 16, generator=torch.Generator().manual_seed(1))
    t = torch.tensor([7.0])
    with torch.no_grad():
        assert torch.equal(bundle.unet.eval()(x, t), loaded.unet.eval()(x, t))
