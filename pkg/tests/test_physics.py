"""Image formation model: degradation, restoration, transmission."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aquadiff.physics import (
    AmbientLight,
    AttenuationParams,
    PhysicsError,
    degrade,
    restore,
    transmission,
)


def _random_scene(rng, h=16, w=16):
    clean = rng.uniform(0.0, 1.0, size=(h, w, 3))
    ambient = AmbientLight(rgb=rng.uniform(0.05, 0.6, size=3))
    beta = rng.uniform(0.05, 0.8, size=3)
    params = AttenuationParams(beta_d=beta, beta_b=beta.copy(), depth=float(rng.uniform(0.5, 6.0)))
    return clean, ambient, params


def test_degrade_single_pixel_hand_check():
    clean = np.full((1, 1, 3), 0.8)
    ambient = AmbientLight(rgb=np.array([0.1, 0.2, 0.3]))
    params = AttenuationParams(
        beta_d=np.array([0.5, 0.5, 0.5]), beta_b=np.array([0.5, 0.5, 0.5]), depth=2.0
    )
    raw = degrade(clean, ambient, params)
    t = np.exp(-1.0)
    expected = 0.8 * t + np.array([0.1, 0.2, 0.3]) * (1.0 - t)
    np.testing.assert_allclose(raw[0, 0], expected, rtol=0, atol=1e-15)


def test_zero_depth_is_identity(rng):
    clean = rng.uniform(size=(8, 8, 3))
    ambient = AmbientLight(rgb=np.array([0.2, 0.3, 0.4]))
    params = AttenuationParams(
        beta_d=np.array([0.4, 0.2, 0.1]), beta_b=np.array([0.4, 0.2, 0.1]), depth=0.0
    )
    np.testing.assert_array_equal(degrade(clean, ambient, params), clean)


def test_round_trip_exact_when_coefficients_shared(rng):
    for _ in range(20):
        clean, ambient, params = _random_scene(rng)
        raw = degrade(clean, ambient, params, clip=False)
        inv = transmission(params).reciprocal()
        restored = restore(raw, ambient, inv, clip=False)
        assert np.max(np.abs(restored - clean)) < 1e-12


def test_round_trip_with_depth_map(rng):
    clean = rng.uniform(size=(12, 10, 3))
    depth = rng.uniform(0.5, 5.0, size=(12, 10))
    ambient = AmbientLight(rgb=np.array([0.15, 0.25, 0.35]))
    beta = np.array([0.5, 0.3, 0.1])
    params = AttenuationParams(beta_d=beta, beta_b=beta.copy(), depth=depth)
    raw = degrade(clean, ambient, params, clip=False)
    restored = restore(raw, ambient, transmission(params).reciprocal(), clip=False)
    assert np.max(np.abs(restored - clean)) < 1e-12


def test_transmission_formula():
    params = AttenuationParams(
        beta_d=np.array([0.5, 0.25, 0.125]),
        beta_b=np.array([0.5, 0.25, 0.125]),
        depth=4.0,
    )
    tmap = transmission(params)
    np.testing.assert_allclose(tmap.t, np.exp(-np.array([2.0, 1.0, 0.5])))


def test_degrade_interpolates_toward_ambient():
    # as depth grows the raw image approaches the ambient light
    clean = np.full((4, 4, 3), 0.9)
    ambient = AmbientLight(rgb=np.array([0.2, 0.2, 0.2]))
    beta = np.array([0.5, 0.5, 0.5])
    params = AttenuationParams(beta_d=beta, beta_b=beta.copy(), depth=80.0)
    raw = degrade(clean, ambient, params)
    np.testing.assert_allclose(raw, 0.2, atol=1e-10)


def test_degrade_clips_into_unit_range(rng):
    clean = rng.uniform(size=(6, 6, 3))
    ambient = AmbientLight(rgb=np.array([0.9, 0.9, 0.9]))
    beta = np.array([0.01, 0.01, 0.01])
    params = AttenuationParams(beta_d=beta, beta_b=beta.copy(), depth=1.0)
    raw = degrade(clean, ambient, params)
    assert raw.min() >= 0.0 and raw.max() <= 1.0


def test_restore_accepts_scalar_and_map_gains(rng):
    raw = rng.uniform(0.2, 0.8, size=(5, 5, 3))
    ambient = AmbientLight(rgb=np.array([0.1, 0.1, 0.1]))
    out_scalar = restore(raw, ambient, 1.5, clip=False)
    out_map = restore(raw, ambient, np.full((5, 5, 3), 1.5), clip=False)
    np.testing.assert_allclose(out_scalar, out_map)


def test_validation_errors():
    good = np.zeros((4, 4, 3))
    amb = AmbientLight(rgb=np.array([0.1, 0.2, 0.3]))
    beta = np.array([0.1, 0.2, 0.3])
    with pytest.raises(PhysicsError):
        AmbientLight(rgb=np.array([0.1, 0.2]))
    with pytest.raises(PhysicsError):
        AmbientLight(rgb=np.array([0.1, 0.2, 1.5]))
    with pytest.raises(PhysicsError):
        AttenuationParams(beta_d=-beta, beta_b=beta, depth=1.0)
    with pytest.raises(PhysicsError):
        AttenuationParams(beta_d=beta, beta_b=beta, depth=np.full((2, 2), np.nan))
    params = AttenuationParams(beta_d=beta, beta_b=beta, depth=np.ones((3, 3)))
    with pytest.raises(PhysicsError):
        degrade(good, amb, params)  # depth map shape mismatch
    with pytest.raises(PhysicsError):
        degrade(np.zeros((4, 4, 4)), amb, AttenuationParams(beta_d=beta, beta_b=beta, depth=1.0))
    with pytest.raises(PhysicsError):
        restore(good, amb, 0.5)  # gain below 1


@settings(max_examples=25, deadline=None)
@given(
    depth=st.floats(0.0, 8.0),
    beta_r=st.floats(0.01, 1.0),
    beta_g=st.floats(0.01, 1.0),
    beta_b=st.floats(0.01, 1.0),
    seed=st.integers(0, 2**31 - 1),
)
def test_round_trip_property(depth, beta_r, beta_g, beta_b, seed):
    local = np.random.default_rng(seed)
    clean = local.uniform(size=(6, 6, 3))
    ambient = AmbientLight(rgb=local.uniform(0.05, 0.8, size=3))
    beta = np.array([beta_r, beta_g, beta_b])
    params = AttenuationParams(beta_d=beta, beta_b=beta.copy(), depth=depth)
    raw = degrade(clean, ambient, params, clip=False)
    restored = restore(raw, ambient, transmission(params).reciprocal(), clip=False)
    assert np.max(np.abs(restored - clean)) < 1e-9
