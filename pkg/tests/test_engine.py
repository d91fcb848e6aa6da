"""Autodiff engine: primitive adjoints, graph semantics, Adam."""

import numpy as np
import pytest

from mambareg.engine import (
    NumericError,
    ShapeError,
    Tensor,
    adam_init,
    adam_step,
    finite_difference_check,
    gradients,
    linear_recurrence,
    ops,
    parallel_map,
    parameter,
    warp3d,
)

RNG = np.random.default_rng(20240817)


def _weighted_sum(t, rng):
    """Scalarize with a fixed random projection so gradients are non-trivial."""
    c = Tensor(rng.normal(size=t.shape))
    return ops.tsum(ops.mul(t, c))


def _primitive_cases(seed):
    """One graph builder per primitive kind; (name, leaf, builder)."""
    rng = np.random.default_rng(seed)
    cases = []

    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(3, 4)))
    cases += [
        ("add", a, lambda: _weighted_sum(ops.add(a, b), np.random.default_rng(1))),
        ("mul", b, lambda: _weighted_sum(ops.mul(a, b), np.random.default_rng(2))),
        ("neg", a, lambda: _weighted_sum(ops.neg(a), np.random.default_rng(3))),
    ]

    m = parameter(rng.normal(size=(5, 4)))
    w = parameter(rng.normal(size=(4, 3)))
    cases += [
        ("matmul_a", m, lambda: _weighted_sum(ops.matmul(m, w), np.random.default_rng(4))),
        ("matmul_b", w, lambda: _weighted_sum(ops.matmul(m, w), np.random.default_rng(5))),
    ]

    x1 = parameter(rng.normal(size=(4, 5)))
    for name, fn in (("exp", ops.exp), ("sigmoid", ops.sigmoid), ("silu", ops.silu),
                     ("softplus", ops.softplus)):
        cases.append((name, x1, (lambda f: lambda: _weighted_sum(f(x1), np.random.default_rng(6)))(fn)))
    xpos = parameter(rng.uniform(0.5, 3.0, size=(4, 5)))
    cases.append(("log", xpos, lambda: _weighted_sum(ops.log(xpos), np.random.default_rng(7))))

    xr = parameter(rng.normal(size=(2, 3, 4)))
    cases += [
        ("sum", xr, lambda: ops.tsum(ops.mul(ops.tsum(xr, axis=1), 1.7))),
        ("mean", xr, lambda: ops.tsum(ops.mul(ops.tmean(xr, axis=(0, 2)), -0.9))),
        ("reshape", xr, lambda: _weighted_sum(ops.reshape(xr, (4, 6)), np.random.default_rng(8))),
        ("transpose", xr, lambda: _weighted_sum(ops.transpose(xr, (2, 0, 1)), np.random.default_rng(9))),
        ("slice", xr, lambda: _weighted_sum(xr[1:, :2, ::2], np.random.default_rng(10))),
    ]

    c1 = parameter(rng.normal(size=(2, 3)))
    c2 = parameter(rng.normal(size=(4, 3)))
    cases.append(("concat", c1, lambda: _weighted_sum(ops.concat([c1, c2], axis=0),
                                                      np.random.default_rng(11))))

    sm = parameter(rng.normal(size=(5, 6)))
    cases += [
        ("softmax", sm, lambda: _weighted_sum(ops.softmax(sm), np.random.default_rng(12))),
        ("l2normalize", sm, lambda: _weighted_sum(ops.l2normalize(sm), np.random.default_rng(13))),
    ]

    ln_x = parameter(rng.normal(size=(7, 5)))
    ln_g = parameter(rng.normal(size=(5,)))
    ln_b = parameter(rng.normal(size=(5,)))
    cases += [
        ("layernorm_x", ln_x, lambda: _weighted_sum(ops.layernorm(ln_x, ln_g, ln_b),
                                                    np.random.default_rng(14))),
        ("layernorm_gamma", ln_g, lambda: _weighted_sum(ops.layernorm(ln_x, ln_g, ln_b),
                                                        np.random.default_rng(15))),
    ]

    cx = parameter(rng.normal(size=(5, 5, 5, 2)))
    cw = parameter(rng.normal(size=(3, 3, 3, 2, 3)))
    cb = parameter(rng.normal(size=(3,)))
    cases += [
        ("conv3d_x", cx, lambda: _weighted_sum(ops.conv3d(cx, cw, cb), np.random.default_rng(16))),
        ("conv3d_w", cw, lambda: _weighted_sum(ops.conv3d(cx, cw, cb), np.random.default_rng(17))),
        ("conv3d_stride2", cx, lambda: _weighted_sum(ops.conv3d(cx, cw, cb, stride=2),
                                                     np.random.default_rng(18))),
    ]

    dx = parameter(rng.normal(size=(2, 9, 3)))
    dw = parameter(rng.normal(size=(4, 3)))
    cases += [
        ("conv1d_x", dx, lambda: _weighted_sum(ops.conv1d_depthwise(dx, dw),
                                               np.random.default_rng(19))),
        ("conv1d_w", dw, lambda: _weighted_sum(ops.conv1d_depthwise(dx, dw),
                                               np.random.default_rng(20))),
    ]

    ux = parameter(rng.normal(size=(3, 3, 3, 2)))
    cases.append(("upsample_nearest", ux, lambda: _weighted_sum(ops.upsample_nearest3d(ux),
                                                                np.random.default_rng(21))))

    sa = parameter(rng.uniform(0.2, 0.9, size=(2, 11, 2, 3)))
    sx = parameter(rng.normal(size=(2, 11, 2, 3)))
    cases += [
        ("scan_a", sa, lambda: _weighted_sum(linear_recurrence(sa, sx, chunk=4),
                                             np.random.default_rng(22))),
        ("scan_x", sx, lambda: _weighted_sum(linear_recurrence(sa, sx, chunk=None),
                                             np.random.default_rng(23))),
    ]

    wx = parameter(rng.normal(size=(6, 6, 6, 2)))
    wu = parameter(rng.uniform(-0.35, 0.35, size=(6, 6, 6, 3)))
    cases += [
        ("warp_x", wx, lambda: _weighted_sum(warp3d(wx, wu), np.random.default_rng(24))),
        ("warp_u", wu, lambda: _weighted_sum(warp3d(wx, wu), np.random.default_rng(25))),
    ]

    tr = parameter(rng.normal(size=(8, 3)))
    idx = np.array([0, 2, 2, 5, 7])
    cases.append(("take_rows", tr, lambda: _weighted_sum(ops.take_rows(tr, idx),
                                                         np.random.default_rng(26))))
    pw = parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    cases.append(("power", pw, lambda: _weighted_sum(ops.power(pw, 3), np.random.default_rng(27))))
    return cases


_CASE_NAMES = [name for name, _, _ in _primitive_cases(0)]


@pytest.mark.parametrize("case_idx", range(len(_CASE_NAMES)), ids=_CASE_NAMES)
def test_primitive_gradients_20_random_inputs(case_idx):
    """Every primitive passes central differences at 1e-6 in 64-bit mode."""
    for trial in range(20):
        name, leaf, fn = _primitive_cases(1000 + 37 * trial)[case_idx]
        err = finite_difference_check(fn, leaf, max_entries=12, seed=trial)
        assert err <= 1e-6, f"{name} trial {trial}: {err:.3e}"


def test_silu_examples():
    x = parameter([0.0])
    y = ops.tsum(ops.silu(x))
    assert y.item() == 0.0
    y.backward()
    assert np.allclose(x.grad, 0.5)


def test_matmul_identity():
    m = RNG.normal(size=(3, 3))
    out = ops.matmul(Tensor(np.eye(3)), Tensor(m))
    np.testing.assert_array_equal(out.data, m)


def test_conv3d_delta_kernel_is_identity():
    vol = RNG.normal(size=(6, 6, 6, 1))
    k = np.zeros((3, 3, 3, 1, 1))
    k[1, 1, 1, 0, 0] = 1.0
    out = ops.conv3d(Tensor(vol), Tensor(k))
    np.testing.assert_allclose(out.data, vol, atol=1e-15)


def test_polynomial_gradient():
    x = parameter([3.0])
    y = ops.tsum(ops.mul(x, x))
    y.backward()
    assert np.allclose(x.grad, 6.0)


def test_conv3d_gradient_matches_correlation_of_ones():
    # d/dv sum(conv3d(v, k)) gathers every kernel weight contribution at
    # each voxel: the correlation of an all-ones output with the kernel.
    v = parameter(RNG.normal(size=(5, 5, 5, 1)))
    k = Tensor(RNG.normal(size=(3, 3, 3, 1, 1)))
    out = ops.tsum(ops.conv3d(v, k))
    out.backward()
    err = finite_difference_check(lambda: ops.tsum(ops.conv3d(v, k)), v, max_entries=30)
    assert err <= 1e-8
    # interior voxels see the full kernel sum
    assert np.allclose(v.grad[2, 2, 2, 0], k.data.sum())


def test_backward_requires_scalar():
    x = parameter(RNG.normal(size=(3,)))
    with pytest.raises(ShapeError):
        ops.mul(x, 2.0).backward()


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError, match="conv3d"):
        ops.conv3d(Tensor(np.ones((4, 4, 4, 2))), Tensor(np.ones((3, 3, 3, 1, 1))))


def test_nan_detection_names_node():
    x = parameter(np.array(2.0))
    bad = ops.log(ops.add(x, -2.0))  # log(0) -> -inf upstream
    y = ops.mul(bad, 0.0)
    with pytest.raises(NumericError, match="non-finite gradient at node"):
        y.backward(nan_check=True)


def test_fanout_accumulation_is_additive():
    x = parameter(np.array(1.5))
    y = ops.add(ops.mul(x, x), ops.mul(x, 3.0))  # x^2 + 3x -> 2x + 3
    y.backward()
    assert np.allclose(x.grad, 2 * 1.5 + 3)


def test_backward_linearity_of_adjoints():
    for trial in range(5):
        rng = np.random.default_rng(trial)
        x = parameter(rng.normal(size=(4, 3)))
        c1 = Tensor(rng.normal(size=(4, 3)))
        c2 = Tensor(rng.normal(size=(3,)))

        def f():
            return ops.tsum(ops.mul(ops.silu(x), c1))

        def g():
            return ops.tsum(ops.matmul(ops.exp(ops.mul(x, 0.3)), ops.reshape(c2, (3, 1))))

        gf = gradients(f(), [x])[x].copy()
        gg = gradients(g(), [x])[x].copy()
        gsum = gradients(ops.add(f(), g()), [x])[x]
        np.testing.assert_allclose(gsum, gf + gg, rtol=1e-12, atol=1e-12)


def test_forward_purity_bit_identical():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(4, 4, 4, 2)))
    k = Tensor(rng.normal(size=(3, 3, 3, 2, 2)))

    def build():
        return ops.tsum(ops.silu(ops.conv3d(x, k))).item()

    assert build() == build()


def test_parallel_map_matches_sequential():
    rng = np.random.default_rng(5)
    items = [Tensor(rng.normal(size=(8, 8))) for _ in range(6)]

    def job(t):
        return ops.tsum(ops.silu(ops.mul(t, 1.3))).item()

    seq = [job(t) for t in items]
    par = parallel_map(job, items, workers=4)
    assert np.max(np.abs(np.array(seq) - np.array(par))) <= 1e-12


def test_float32_storage_mode():
    x = parameter(np.ones((3, 3), dtype=np.float32), dtype=np.float32)
    y = ops.tsum(ops.silu(x))
    assert y.dtype == np.float32
    y.backward()
    assert x.grad.dtype == np.float32


# -- Adam ---------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    p = parameter(np.array([1.0, -2.0]))
    state = adam_init([p])
    adam_step([p], [np.zeros(2)], state, lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state["step"] == 1


def test_adam_single_step_matches_hand_calculation():
    # g=1 on a fresh state: mhat = 1, vhat = 1, delta = -lr / (1 + eps)
    p = parameter(np.array([0.0]))
    state = adam_init([p])
    adam_step([p], [np.ones(1)], state, lr=0.1, eps=1e-8)
    np.testing.assert_allclose(p.data, [-0.1 / (1.0 + 1e-8)], rtol=1e-12)


def test_adam_two_steps_match_scalar_oracle():
    lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
    grads = [0.7, -0.3]

    # independent scalar re-implementation
    theta, m, v = 0.4, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)

    p = parameter(np.array([0.4]))
    state = adam_init([p])
    for g in grads:
        adam_step([p], [np.array([g])], state, lr=lr, beta1=b1, beta2=b2, eps=eps)
    np.testing.assert_allclose(p.data, [theta], atol=1e-12)


def test_adam_shape_mismatch_rejected():
    p = parameter(np.zeros(3))
    state = adam_init([p])
    with pytest.raises(ShapeError):
        adam_step([p], [np.zeros(4)], state)


def test_fd_check_quadratic_is_exact():
    x = parameter(np.array(1.0))
    err = finite_difference_check(lambda: ops.mul(x, x), x)
    assert err <= 1e-9
