"""Warp, SVF integration, and field types."""

import numpy as np
import pytest

from mambareg.engine import ShapeError, Tensor, as_tensor, finite_difference_check, ops, parameter, warp3d
from mambareg.fields import (
    DisplacementField,
    LabelVolume,
    VelocityField,
    Volume,
    integrate_svf,
    one_hot,
    warp,
    warp_labels,
)

RNG = np.random.default_rng(99)


def _smooth_velocity(shape, amplitude, seed=0, fmax=0.5):
    """Low-frequency field; mutual agreement of the two integrators needs
    curvature small against the grid, so frequencies stay below ~0.5 cycles."""
    rng = np.random.default_rng(seed)
    coords = [np.arange(n) / n for n in shape]
    gx, gy, gz = np.meshgrid(*coords, indexing="ij")
    comps = []
    for _ in range(3):
        k = rng.uniform(0.2, fmax, size=3)
        ph = rng.uniform(0, 2 * np.pi)
        comps.append(np.cos(2 * np.pi * (k[0] * gx + k[1] * gy + k[2] * gz) + ph))
    v = np.stack(comps, axis=-1)
    return v * amplitude / np.abs(v).max()


# -- warp -------------------------------------------------------------------


def test_warp_identity_is_exact():
    x = RNG.normal(size=(5, 6, 7, 2))
    out = warp3d(Tensor(x), Tensor(np.zeros((5, 6, 7, 3))))
    np.testing.assert_array_equal(out.data, x)


def test_warp_integer_shift_matches_index_shift():
    x = RNG.normal(size=(6, 6, 6))
    u = np.zeros((6, 6, 6, 3))
    u[..., 0] = 1.0
    out = warp(Tensor(x), Tensor(u))
    # output(p) = input(p + (1,0,0)); last slice clamps to the border
    np.testing.assert_allclose(out.data[:-1], x[1:], atol=1e-14)
    np.testing.assert_allclose(out.data[-1], x[-1], atol=1e-14)


def test_warp_gradients_both_args():
    x = parameter(RNG.normal(size=(6, 6, 6, 1)))
    u = parameter(RNG.uniform(-0.35, 0.35, size=(6, 6, 6, 3)))
    c = Tensor(RNG.normal(size=(6, 6, 6, 1)))

    def fn():
        return ops.tsum(ops.mul(warp3d(x, u), c))

    assert finite_difference_check(fn, x, max_entries=40) <= 1e-4
    assert finite_difference_check(fn, u, max_entries=40) <= 1e-4


def test_warp_shape_mismatch():
    with pytest.raises(ShapeError):
        warp3d(Tensor(np.zeros((4, 4, 4, 1))), Tensor(np.zeros((5, 4, 4, 3))))


def test_warp_volume_and_labels():
    vol = Volume(RNG.uniform(0, 1, size=(6, 6, 6)), (1.0, 1.0, 1.0))
    disp = DisplacementField(np.zeros((6, 6, 6, 3)))
    out = warp(vol, disp)
    assert isinstance(out, Volume)
    np.testing.assert_array_equal(out.grid, vol.grid)

    labels = LabelVolume(RNG.integers(0, 3, size=(6, 6, 6)), 3)
    hard, soft = warp_labels(labels, disp, return_soft=True)
    np.testing.assert_array_equal(hard.grid, labels.grid)
    np.testing.assert_allclose(soft.data, one_hot(labels.grid, 3), atol=1e-14)


# -- integrate_svf ------------------------------------------------------------


def test_integrate_zero_velocity_is_identity():
    u = integrate_svf(as_tensor(np.zeros((5, 5, 5, 3))), steps=7)
    np.testing.assert_array_equal(u.data, 0.0)


def test_integrate_constant_velocity_is_exact_translation():
    v = np.zeros((8, 8, 8, 3))
    v[..., 0] = 1.3
    u = integrate_svf(as_tensor(v), steps=7)
    np.testing.assert_allclose(u.data, v, atol=1e-6)


def test_integrate_matches_euler_oracle():
    T = 7
    for seed in range(3):
        v = _smooth_velocity((16, 16, 16), 0.45, seed=seed)
        u_ss = integrate_svf(as_tensor(v), steps=T).data

        # Euler: u <- u + dt * v(id + u), 2^T equal steps
        dt = 1.0 / 2 ** T
        u = np.zeros_like(v)
        vt = as_tensor(v)
        for _ in range(2 ** T):
            u = u + dt * warp3d(vt, as_tensor(u)).data
        interior = (slice(2, -2),) * 3
        assert np.abs((u_ss - u)[interior]).max() <= 1e-3


def test_integrate_converges_in_steps():
    v = _smooth_velocity((10, 10, 10), 1.5, seed=5)
    results = {T: integrate_svf(as_tensor(v), steps=T).data for T in range(4, 10)}
    diffs = [np.abs(results[T + 1] - results[T]).max() for T in range(4, 9)]
    assert all(d2 < d1 for d1, d2 in zip(diffs, diffs[1:]))


def test_integrate_small_field_error_is_quadratic():
    v0 = _smooth_velocity((8, 8, 8), 1.0, seed=7)
    scales = [0.5, 0.25, 0.125, 0.0625]
    errs = []
    for s in scales:
        u = integrate_svf(as_tensor(v0 * s), steps=7).data
        errs.append(np.abs(u - v0 * s).max())
    slope = np.polyfit(np.log(scales), np.log(errs), 1)[0]
    assert slope >= 1.9


def test_integrate_differentiable():
    v = parameter(_smooth_velocity((6, 6, 6), 0.7, seed=9))
    c = Tensor(RNG.normal(size=(6, 6, 6, 3)))

    def fn():
        return ops.tsum(ops.mul(integrate_svf(v, steps=4), c))

    assert finite_difference_check(fn, v, max_entries=30) <= 1e-4


def test_integrate_wrapped_types():
    v = VelocityField(_smooth_velocity((6, 6, 6), 0.5))
    out = integrate_svf(v, steps=5)
    assert isinstance(out, DisplacementField)


def test_integrate_rejects_negative_steps():
    with pytest.raises(ValueError):
        integrate_svf(as_tensor(np.zeros((4, 4, 4, 3))), steps=-1)


# -- types -------------------------------------------------------------------


def test_volume_validation():
    with pytest.raises(ShapeError):
        Volume(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4, 4)), spacing=(1.0, 0.0, 1.0))


def test_label_volume_validation():
    with pytest.raises(ValueError):
        LabelVolume(np.full((3, 3, 3), 5), num_classes=4)


def test_velocity_field_rejects_nonfinite():
    bad = np.zeros((3, 3, 3, 3))
    bad[0, 0, 0, 0] = np.inf
    with pytest.raises(ValueError):
        VelocityField(bad)


def test_one_hot_channels_sum_to_one():
    labels = RNG.integers(0, 4, size=(5, 5, 5))
    oh = one_hot(labels, 4)
    np.testing.assert_array_equal(oh.sum(axis=-1), 1.0)
    np.testing.assert_array_equal(np.argmax(oh, axis=-1), labels)
