import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dragsplat import tensor as T
from dragsplat.tensor import Tensor

from oracles import check_grads

RNG = np.random.default_rng(0)


def randn(*shape):
    return RNG.standard_normal(shape)


def test_add_elementwise():
    out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_matmul_identity():
    x = randn(3, 5)
    out = T.matmul(Tensor(np.eye(3)), Tensor(x))
    np.testing.assert_allclose(out.data, x)


def test_softmax_symmetry():
    out = T.softmax(Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ValueError, match="matmul"):
        T.matmul(Tensor(randn(2, 3)), Tensor(randn(4, 2)))


def test_backward_square_sum():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    loss = T.tsum(x * x)
    loss.backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_constant_loss_zero_grads():
    x = Tensor(randn(3), requires_grad=True)
    loss = Tensor(5.0)
    gm = T.gradients(loss, [x])
    np.testing.assert_array_equal(gm[id(x)], np.zeros(3))


def test_backward_requires_scalar():
    x = Tensor(randn(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        (x * x).backward()


def test_backward_deterministic():
    def run():
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3) / 7, requires_grad=True)
        w = Tensor(np.arange(12, dtype=np.float64).reshape(3, 4) / 11, requires_grad=True)
        loss = T.mse(T.silu(x @ w), Tensor(np.ones((2, 4))))
        loss.backward()
        return x.grad.copy(), w.grad.copy()

    g1, g2 = run(), run()
    assert np.array_equal(g1[0], g2[0]) and np.array_equal(g1[1], g2[1])


# -- finite-difference checks of every primitive ------------------------------


def test_grad_elementwise_ops():
    a, b = randn(3, 4), randn(3, 4) + 3.0
    check_grads(lambda x, y: T.tsum(x * y + x / y - y), [a, b])
    check_grads(lambda x: T.tsum(T.texp(x) + T.tsqrt(x * x + 1.0)), [a])
    check_grads(lambda x: T.tsum(T.sigmoid(x) * T.silu(x)), [a])
    check_grads(lambda x: T.tsum(T.tlog(x)), [np.abs(a) + 0.5])
    check_grads(lambda x: T.tsum(T.pow_const(x, 3.0)), [a])


def test_grad_broadcast_bias():
    x, b = randn(4, 3), randn(3)
    check_grads(lambda t, u: T.tsum((t + u) * (t + u)), [x, b])


def test_grad_matmul_chain():
    a, b, c = randn(3, 4), randn(4, 5), randn(5, 2)
    check_grads(lambda x, y, z: T.tsum(x @ y @ z), [a, b, c])


def test_grad_softmax():
    x = randn(5, 7)
    w = randn(5, 7)
    check_grads(lambda t: T.tsum(T.softmax(t) * Tensor(w)), [x])


def test_grad_reductions_and_shapes():
    x = randn(3, 4, 5)
    m1 = randn(12, 2)
    check_grads(lambda t: T.tsum(T.tmean(t, axis=1) * T.tmean(t, axis=1)), [x])
    check_grads(lambda t: T.tsum(T.transpose(T.reshape(t, (12, 5)), (1, 0)) @ Tensor(m1)), [x])
    check_grads(lambda t: T.tsum(T.tslice(t, (slice(1, 3), slice(None), slice(0, 2))) * 3.0), [x])


def test_grad_concat():
    a, b = randn(2, 3), randn(4, 3)
    check_grads(lambda x, y: T.tsum(T.concat([x, y], axis=0) * T.concat([x, y], axis=0)), [a, b])


def test_grad_losses():
    a, b = randn(4, 4), randn(4, 4)
    check_grads(lambda x, y: T.mse(x, y), [a, b])
    # l1 needs inputs away from ties for a clean subgradient
    check_grads(lambda x, y: T.l1(x, y), [a, b + 1.7])


def test_grad_conv2d():
    x = randn(2, 3, 6, 6)
    w = randn(4, 3, 3, 3)
    b = randn(4)
    m1 = randn(2, 4, 6, 6)
    m2 = randn(2, 4, 3, 3)
    check_grads(lambda t, u, v: T.tsum(T.conv2d(t, u, v) * Tensor(m1)), [x, w, b])
    check_grads(lambda t, u: T.tsum(T.conv2d(t, u, stride=2) * Tensor(m2)), [x, w])


def test_conv2d_matches_direct_loop():
    x = randn(1, 2, 5, 5)
    w = randn(3, 2, 3, 3)
    out = T.conv2d(Tensor(x), Tensor(w), stride=1, pad=1).data
    ref = np.zeros((1, 3, 5, 5))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, o, i, j] = np.sum(xp[0, :, i : i + 3, j : j + 3] * w[o])
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_grad_upsample_nearest():
    x = randn(1, 2, 3, 3)
    mult = randn(1, 2, 6, 6)
    check_grads(lambda t: T.tsum(T.upsample_nearest(t) * Tensor(mult)), [x])


def test_grad_bilinear_sample():
    fmap = randn(3, 8, 8)
    coords = RNG.uniform(0.5, 6.5, size=(10, 2))
    mult = randn(10, 3)
    check_grads(lambda m: T.tsum(T.bilinear_sample(m, coords) * Tensor(mult)), [fmap])


def test_bilinear_sample_integer_coords_exact():
    fmap = randn(2, 6, 7)
    xs = np.array([[3, 4], [0, 0], [6, 5], [2, 1]], dtype=np.float64)
    out = T.bilinear_sample(Tensor(fmap), xs).data
    for k, (x, y) in enumerate(xs.astype(int)):
        np.testing.assert_array_equal(out[k], fmap[:, y, x])


def test_bilinear_sample_clamps_to_border():
    fmap = randn(1, 4, 4)
    out = T.bilinear_sample(Tensor(fmap), np.array([[-3.0, -3.0], [10.0, 10.0]])).data
    np.testing.assert_allclose(out[0, 0], fmap[0, 0, 0])
    np.testing.assert_allclose(out[1, 0], fmap[0, 3, 3])


def test_grad_resize_bilinear():
    x = randn(2, 4, 4)
    mult = randn(2, 8, 8)
    check_grads(lambda t: T.tsum(T.resize_bilinear(t, 8, 8) * Tensor(mult)), [x])


def test_stop_gradient_blocks():
    x = Tensor(randn(3), requires_grad=True)
    loss = T.tsum(T.stop_gradient(x) * x)
    loss.backward()
    np.testing.assert_allclose(x.grad, x.data)  # only the live branch contributes


def test_no_grad_context():
    x = Tensor(randn(3), requires_grad=True)
    with T.no_grad():
        y = x * x
    assert y._parents == () and not y.requires_grad


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_grad_random_composite_graphs(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 3))
    b = rng.standard_normal((3, 3))

    def build(x, y):
        h = T.silu(x @ y + x)
        p = T.softmax(h, axis=-1)
        return T.mse(p @ y, x) + T.tmean(T.texp(h * 0.1))

    check_grads(build, [a, b])


def test_adam_zero_grad_keeps_params_bitwise():
    p = Tensor(randn(4), requires_grad=True)
    before = p.data.copy()
    opt = T.Adam([p], lr=0.1)
    p.grad = np.zeros(4)
    opt.step()
    assert np.array_equal(p.data, before)
