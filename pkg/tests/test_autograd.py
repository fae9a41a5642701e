import numpy as np
import pytest

from fad import autograd as ag
from fad.spectral import BandThresholds


def numeric_grad(fn, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[i] += eps
        xm.flat[i] -= eps
        g.flat[i] = (fn(xp) - fn(xm)) / (2 * eps)
    return g


def check(build, x, rtol=1e-6, atol=1e-8):
    """``build`` maps a Tensor to a scalar Tensor."""
    leaf = ag.Tensor(x, requires_grad=True)
    ag.backward(build(leaf))
    num = numeric_grad(lambda v: float(build(ag.Tensor(v)).data), x)
    np.testing.assert_allclose(leaf.grad, num, rtol=rtol, atol=atol)


def weighted(t, seed=0):
    w = np.random.default_rng(seed).standard_normal(t.shape)
    return ag.sum_all(_mul_const(t, w))


def _mul_const(t, w):
    # elementwise product with a constant, built from primitives under test elsewhere
    return ag._node(t.data * w, (t,), lambda g: t._accumulate(g * w))


OPS = {
    "relu": lambda t: ag.relu(t),
    "avg_pool2": lambda t: ag.avg_pool2(t),
    "flatten": lambda t: ag.flatten(t),
    "l2_normalize": lambda t: ag.l2_normalize(ag.flatten(t)),
    "scale": lambda t: ag.scale(t, -2.5),
    "add_self": lambda t: ag.add(t, t),
    "mean_all": lambda t: ag.mean_all(t),
    "band_low": lambda t: ag.band_split(t, BandThresholds())[0],
    "band_mid": lambda t: ag.band_split(t, BandThresholds())[1],
    "band_high": lambda t: ag.band_split(t, BandThresholds(0.2, 0.6))[2],
    "dft_mask_idft": lambda t: ag.idft2_real(ag.apply_mask(ag.dft2(t), np.eye(4)[::-1] + np.eye(4))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients(name, rng):
    x = rng.standard_normal((2, 3, 4, 4))
    check(lambda t: weighted(OPS[name](t)), x)


def test_conv2d_gradients(rng):
    x, w, b = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    check(lambda t: weighted(ag.conv2d(t, ag.Tensor(w), ag.Tensor(b))), x)
    check(lambda t: weighted(ag.conv2d(ag.Tensor(x), t, ag.Tensor(b))), w)
    check(lambda t: weighted(ag.conv2d(ag.Tensor(x), ag.Tensor(w), t)), b)


def test_matmul_bias_transpose(rng):
    a, b, c = rng.standard_normal((4, 3)), rng.standard_normal((3, 5)), rng.standard_normal(5)
    check(lambda t: weighted(ag.add_bias(ag.matmul(t, ag.Tensor(b)), ag.Tensor(c))), a)
    check(lambda t: weighted(ag.matmul(ag.Tensor(a), t)), b)
    check(lambda t: weighted(ag.add_bias(ag.Tensor(a @ b), t)), c)
    check(lambda t: weighted(ag.transpose(t)), a)


def test_class_means_and_cross_entropy(rng):
    labels = np.array([0, 1, 1, 2, 0, 2])
    check(lambda t: weighted(ag.class_means(t, labels, 3)), rng.standard_normal((6, 4)))
    check(lambda t: ag.cross_entropy(t, labels), rng.standard_normal((6, 3)))
    with pytest.raises(ValueError):
        ag.class_means(ag.Tensor(np.zeros((2, 2))), np.array([0, 0]), 2)


def test_l2_normalize_zero_row_is_finite():
    x = ag.Tensor(np.array([[0.0, 0.0], [3.0, 4.0]]), requires_grad=True)
    ag.backward(ag.sum_all(ag.l2_normalize(x)))
    assert np.all(np.isfinite(x.grad))
    np.testing.assert_allclose(ag.l2_normalize(x).data[1], [0.6, 0.8])


def test_sum_gives_ones_and_unused_leaf_zero(rng):
    p = ag.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    unused = ag.Tensor(rng.standard_normal(2), requires_grad=True)
    ag.backward(ag.sum_all(p))
    assert np.array_equal(p.grad, np.ones((3, 4)))
    assert unused.grad is None or not np.any(unused.grad)


def test_shared_node_accumulates(rng):
    x = ag.Tensor(rng.standard_normal(4), requires_grad=True)
    y = ag.scale(x, 3.0)
    ag.backward(ag.sum_all(ag.add(y, y)))
    np.testing.assert_allclose(x.grad, 6.0)


def test_unrecorded_op_raises():
    leaf = ag.Tensor(1.0, requires_grad=True)
    rogue = ag.Tensor(2.0)
    rogue.requires_grad = True
    rogue._parents = (leaf,)
    with pytest.raises(ag.GraphError):
        ag.backward(rogue)


def test_non_scalar_loss_rejected():
    with pytest.raises(ag.GraphError):
        ag.backward(ag.Tensor(np.zeros(3), requires_grad=True))


def test_deep_chain_no_recursion_limit():
    x = ag.Tensor(np.ones(2), requires_grad=True)
    y = x
    for _ in range(5000):
        y = ag.scale(y, 1.0)
    ag.backward(ag.sum_all(y))
    np.testing.assert_allclose(x.grad, 1.0)


def test_relu_pattern_recording():
    x = ag.Tensor(np.array([-1.0, 2.0, 0.0]))
    with ag.record_relu_patterns() as log:
        ag.relu(ag.relu(x))
    assert len(log) == 2 and log[0].tolist() == [False, True, False]
    ag.relu(x)
    assert len(log) == 2
