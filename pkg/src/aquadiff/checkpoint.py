"""Self-describing checkpoint container.

A checkpoint is a single zip archive holding:

* ``format.json`` — format tag and version;
* ``config.json`` — network configs, schedule parameters, EMA decay and
  the training step counter;
* one little-endian ``.npy`` entry per named array, grouped by prefix:
  ``theta/`` (denoiser), ``anet/``, ``tnet/``, ``ema/`` and, when an
  optimizer snapshot is included, ``optim/``.

Arrays round-trip bitwise; a loaded bundle reproduces the saved one
exactly (weights, EMA shadows, schedule and step counter).
"""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .networks import ModelBundle, PhysNetConfig, UNetConfig
from .schedule import build_schedule

FORMAT_TAG = "aquadiff-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint archive is missing or malformed."""


def _config_payload(bundle: ModelBundle) -> dict[str, Any]:
    return {
        "unet": dataclasses.asdict(bundle.unet_config),
        "phys": dataclasses.asdict(bundle.phys_config),
        "schedule": bundle.schedule.config(),
        "ema_decay": bundle.ema_decay,
        "step": bundle.step,
    }


def _write_array(archive: zipfile.ZipFile, name: str, array: np.ndarray) -> None:
    buf = io.BytesIO()
    np.save(buf, array, allow_pickle=False)
    archive.writestr(name, buf.getvalue())


def _read_array(archive: zipfile.ZipFile, name: str) -> np.ndarray:
    with archive.open(name) as fh:
        return np.load(io.BytesIO(fh.read()), allow_pickle=False)


def save_checkpoint(
    path: str | Path,
    bundle: ModelBundle,
    optimizer_state: dict[str, Any] | None = None,
) -> Path:
    """Write the bundle (and optionally optimizer moments) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as archive:
        archive.writestr(
            "format.json",
            json.dumps({"format": FORMAT_TAG, "version": FORMAT_VERSION}),
        )
        archive.writestr("config.json", json.dumps(_config_payload(bundle), indent=2))
        for name, param in bundle.named_parameters():
            _write_array(archive, f"weights/{name}.npy", param.detach().cpu().numpy())
        for name, shadow in bundle.ema.items():
            _write_array(archive, f"ema/{name}.npy", shadow.cpu().numpy())
        if optimizer_state is not None:
            meta: dict[str, Any] = {"steps": {}, "param_groups": optimizer_state["param_groups"]}
            for name, slots in optimizer_state["state"].items():
                meta["steps"][name] = slots["step"]
                _write_array(archive, f"optim/{name}.exp_avg.npy", slots["exp_avg"])
                _write_array(archive, f"optim/{name}.exp_avg_sq.npy", slots["exp_avg_sq"])
            archive.writestr("optim.json", json.dumps(meta))
    return path


def _load_configs(payload: dict[str, Any]) -> tuple[UNetConfig, PhysNetConfig]:
    unet_raw = dict(payload["unet"])
    phys_raw = dict(payload["phys"])
    for key, value in list(unet_raw.items()):
        if isinstance(value, list):
            unet_raw[key] = tuple(value)
    for key, value in list(phys_raw.items()):
        if isinstance(value, list):
            phys_raw[key] = tuple(value)
    return UNetConfig(**unet_raw), PhysNetConfig(**phys_raw)


def load_checkpoint(
    path: str | Path,
    device: str | torch.device = "cpu",
    load_optimizer: bool = False,
) -> tuple[ModelBundle, dict[str, Any] | None]:
    """Rebuild a bundle from an archive written by :func:`save_checkpoint`.

    Returns the bundle and, when requested and present, the optimizer
    snapshot in the same named layout it was saved with.
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        archive = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"not a checkpoint archive: {path}") from exc
    with archive:
        names = set(archive.namelist())
        if "format.json" not in names or "config.json" not in names:
            raise CheckpointError(f"missing metadata entries in {path}")
        header = json.loads(archive.read("format.json"))
        if header.get("format") != FORMAT_TAG:
            raise CheckpointError(f"unrecognized format tag {header.get('format')!r}")
        if header.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported version {header.get('version')!r}")
        payload = json.loads(archive.read("config.json"))
        unet_config, phys_config = _load_configs(payload)
        sched = payload["schedule"]
        schedule = build_schedule(
            timesteps=sched["timesteps"],
            kind=sched["kind"],
            beta_start=sched["beta_start"],
            beta_end=sched["beta_end"],
        )
        bundle = ModelBundle.create(
            schedule,
            unet_config,
            phys_config,
            ema_decay=payload["ema_decay"],
        )
        bundle.step = int(payload["step"])

        with torch.no_grad():
            for name, param in bundle.named_parameters():
                entry = f"weights/{name}.npy"
                if entry not in names:
                    raise CheckpointError(f"missing weight array {entry}")
                array = _read_array(archive, entry)
                if tuple(array.shape) != tuple(param.shape):
                    raise CheckpointError(
                        f"shape mismatch for {name}: archive {array.shape}, "
                        f"model {tuple(param.shape)}"
                    )
                param.copy_(torch.from_numpy(array))
        for name in list(bundle.ema):
            entry = f"ema/{name}.npy"
            if entry not in names:
                raise CheckpointError(f"missing EMA array {entry}")
            bundle.ema[name] = torch.from_numpy(_read_array(archive, entry))

        optimizer_state: dict[str, Any] | None = None
        if load_optimizer and "optim.json" in names:
            meta = json.loads(archive.read("optim.json"))
            optimizer_state = {"param_groups": meta["param_groups"], "state": {}}
            for name, step in meta["steps"].items():
                optimizer_state["state"][name] = {
                    "step": step,
                    "exp_avg": _read_array(archive, f"optim/{name}.exp_avg.npy"),
                    "exp_avg_sq": _read_array(archive, f"optim/{name}.exp_avg_sq.npy"),
                }
    bundle.to(device)
    return bundle, optimizer_state
