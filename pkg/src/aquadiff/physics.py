"""Underwater image formation model and its inverse.

A raw underwater pixel mixes two light paths: object radiance attenuated by
the water column (direct transmission) and ambient light scattered into the
camera by suspended particles (backscatter).  Per color channel c,

    raw_c = clean_c * exp(-beta_d_c * d) + ambient_c * (1 - exp(-beta_b_c * d))

with d the transmission distance in meters.  Restoration inverts the direct
path only, treating the two attenuation coefficients as equal:

    clean_c = (raw_c - ambient_c) * exp(beta_d_c * d) + ambient_c

All images are float arrays of shape (H, W, 3) with values in [0, 1], RGB
channel order.  Depth and coefficients may be scalars or per-pixel fields;
scalars broadcast.  Outputs are clamped to [0, 1] only when `clip=True`
(the default) so that compositions used in round-trip tests stay exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "AmbientLight",
    "AttenuationParams",
    "TransmissionMap",
    "PhysicsError",
    "transmission",
    "degrade",
    "restore",
]


class PhysicsError(ValueError):
    """Invalid parameter or shape passed to a formation-model operation."""


def _as_channels(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(3, float(arr))
    if arr.shape != (3,):
        raise PhysicsError(f"{name} must be a scalar or length-3 per-channel array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise PhysicsError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class AmbientLight:
    """Spatially constant per-channel background light, each value in [0, 1]."""

    rgb: np.ndarray

    def __post_init__(self):
        arr = _as_channels(self.rgb, "ambient light")
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            raise PhysicsError("ambient light components must lie in [0, 1]")
        object.__setattr__(self, "rgb", arr)


@dataclass(frozen=True)
class AttenuationParams:
    """Per-channel attenuation coefficients (1/m) and transmission distance (m).

    `depth` is either a scalar or an (H, W) field; coefficients are scalars
    or length-3 arrays.  All values must be finite and non-negative.
    """

    beta_d: np.ndarray
    beta_b: np.ndarray
    depth: np.ndarray = field(default_factory=lambda: np.float64(1.0))

    def __post_init__(self):
        bd = _as_channels(self.beta_d, "beta_d")
        bb = _as_channels(self.beta_b, "beta_b")
        if np.any(bd < 0.0) or np.any(bb < 0.0):
            raise PhysicsError("attenuation coefficients must be >= 0")
        d = np.asarray(self.depth, dtype=np.float64)
        if d.ndim not in (0, 2):
            raise PhysicsError(f"depth must be a scalar or (H, W) field, got shape {d.shape}")
        if not np.all(np.isfinite(d)):
            raise PhysicsError("depth must be finite")
        if np.any(d < 0.0):
            raise PhysicsError("depth must be >= 0")
        object.__setattr__(self, "beta_d", bd)
        object.__setattr__(self, "beta_b", bb)
        object.__setattr__(self, "depth", d)

    def depth_map(self) -> np.ndarray:
        """Depth broadcast to (H, W, 1); scalar depth stays 0-d until broadcast."""
        d = self.depth
        return d[..., None] if d.ndim == 2 else d


@dataclass(frozen=True)
class TransmissionMap:
    """Per-pixel fraction of direct radiance surviving the water path, in (0, 1]."""

    t: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.t, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise PhysicsError("transmission must be finite")
        if np.any(arr <= 0.0) or np.any(arr > 1.0):
            raise PhysicsError("transmission must lie in (0, 1]")
        object.__setattr__(self, "t", arr)

    def reciprocal(self) -> np.ndarray:
        """Inverse-transmission field exp(beta * d), the restoration multiplier."""
        return 1.0 / self.t


def require_image(img, name: str = "image") -> np.ndarray:
    """Validate the (H, W, 3) float-[0, 1] image contract and return float64."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PhysicsError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise PhysicsError(f"{name} must have height and width >= 1")
    if not np.all(np.isfinite(arr)):
        raise PhysicsError(f"{name} must be finite")
    return arr


def transmission(params: AttenuationParams, channel: int | None = None,
                 coefficients: str = "direct") -> TransmissionMap:
    """Transmission map t = exp(-beta * d) for one channel or all three.

    `coefficients` selects the direct ("direct") or backscatter
    ("backscatter") coefficient set.  With `channel=None` the result has a
    trailing channel axis; otherwise it matches the depth field shape.
    """
    if coefficients == "direct":
        beta = params.beta_d
    elif coefficients == "backscatter":
        beta = params.beta_b
    else:
        raise PhysicsError(f"unknown coefficient set {coefficients!r}")
    if channel is not None:
        beta = beta[channel]
        t = np.exp(-beta * params.depth)
    else:
        t = np.exp(-beta * params.depth_map())
    return TransmissionMap(t=np.asarray(t, dtype=np.float64))


def degrade(clean, ambient: AmbientLight, params: AttenuationParams,
            clip: bool = True) -> np.ndarray:
    """Apply the formation model to a clean image.

    raw = clean * exp(-beta_d * d) + ambient * (1 - exp(-beta_b * d)),
    evaluated per pixel and channel.  Scalars broadcast over the image.
    """
    img = require_image(clean, "clean image")
    d = params.depth_map()
    if isinstance(d, np.ndarray) and d.ndim == 3 and d.shape[:2] != img.shape[:2]:
        raise PhysicsError(f"depth field {d.shape[:2]} does not match image {img.shape[:2]}")
    t_direct = np.exp(-params.beta_d * d)
    t_back = np.exp(-params.beta_b * d)
    raw = img * t_direct + ambient.rgb * (1.0 - t_back)
    return np.clip(raw, 0.0, 1.0) if clip else raw


def restore(raw, ambient: AmbientLight, inv_transmission, clip: bool = True) -> np.ndarray:
    """Invert the direct-transmission attenuation of a raw underwater image.

    clean = (raw - ambient) * inv_transmission + ambient, where
    `inv_transmission` is the exp(beta_d * d) multiplier field (values >= 1),
    broadcastable to the image: scalar, (3,), (H, W), or (H, W, 3).
    """
    img = require_image(raw, "raw image")
    inv = np.asarray(inv_transmission, dtype=np.float64)
    if not np.all(np.isfinite(inv)):
        raise PhysicsError("inverse transmission must be finite")
    if np.any(inv < 1.0):
        raise PhysicsError("inverse transmission must be >= 1")
    if inv.ndim == 2:
        inv = inv[..., None]
    if inv.ndim == 3 and inv.shape[:2] != img.shape[:2]:
        raise PhysicsError(f"inverse transmission {inv.shape[:2]} does not match image {img.shape[:2]}")
    out = (img - ambient.rgb) * inv + ambient.rgb
    return np.clip(out, 0.0, 1.0) if clip else out
