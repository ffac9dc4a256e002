import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsmcert.errors import InvalidInput
from rsmcert.nn import (
    Adam, Mlp, backward, constant_mlp, forward, forward_cache, gradient, ibp_forward, init_mlp,
    l1_operator_norm, lipschitz_l1, lipschitz_l1_grad,
)


def relu_net():
    return Mlp([np.array([[2.0]]), np.array([[1.0]])], [np.array([1.0]), np.array([0.0])])


def random_net(g, sizes=None):
    if sizes is None:
        depth = g.integers(1, 4)
        sizes = [int(g.integers(1, 5))] + [int(g.integers(1, 9)) for _ in range(depth - 1)] + [int(g.integers(1, 3))]
    net = init_mlp(sizes, g)
    for b in net.biases:
        b[:] = g.normal(0, 0.5, b.shape)
    return net


def test_forward_examples():
    ident = Mlp([np.eye(2)], [np.zeros(2)])
    np.testing.assert_array_equal(forward(ident, [3.0, -2.0]), [3.0, -2.0])
    assert forward(relu_net(), [-1.0])[0] == 0.0
    assert forward(relu_net(), [1.0])[0] == 3.0


def test_forward_dimension_mismatch():
    with pytest.raises(InvalidInput):
        forward(relu_net(), [1.0, 2.0])


def test_mlp_validation():
    with pytest.raises(InvalidInput):
        Mlp([np.ones((3, 2)), np.ones((1, 4))], [np.zeros(3), np.zeros(1)])
    with pytest.raises(InvalidInput):
        Mlp([np.ones((3, 2))], [np.zeros(2)])
    with pytest.raises(InvalidInput):
        Mlp([np.array([[np.nan]])], [np.zeros(1)])


def test_gradient_closed_form():
    # loss = (w x + b)^2 at x = 1: dL/dw = 2 (w + b)
    w, b = 0.7, -0.2
    net = Mlp([np.array([[w]])], [np.array([b])])
    y = forward(net, [1.0])
    grads = gradient(net, np.array([1.0]), 2.0 * y)
    assert grads[0][0, 0] == pytest.approx(2 * (w + b))
    assert grads[1][0] == pytest.approx(2 * (w + b))


def test_zero_input_zero_first_layer_grad(rng):
    net = init_mlp([3, 5, 1], rng)
    for b in net.biases:
        b[:] = 0.0
    grads = gradient(net, np.zeros((4, 3)), np.ones((4, 1)))
    assert np.all(grads[0] == 0.0)


def _fd_check(net, x, gout, h=1e-4):
    grads = gradient(net, x, gout)
    worst = 0.0
    for p, gp in zip(net.params(), grads):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = float((forward(net, x) * gout).sum())
            p[idx] = old - h
            dn = float((forward(net, x) * gout).sum())
            p[idx] = old
            fd = (up - dn) / (2 * h)
            err = abs(fd - gp[idx]) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst


def test_gradient_matches_finite_differences():
    g = np.random.default_rng(2)
    checked = 0
    while checked < 100:
        net = random_net(g)
        x = g.normal(size=(3, net.in_dim))
        # keep pre-activations away from the ReLU kink so central differences are valid
        _, (inputs, pre) = forward_cache(net, x)
        if any(np.min(np.abs(z)) < 1e-3 for z in pre[:-1]):
            continue
        gout = g.normal(size=(3, net.out_dim))
        assert _fd_check(net, x, gout) < 1e-3
        checked += 1


def test_backward_input_gradient(rng):
    net = init_mlp([2, 6, 1], rng)
    x = np.array([[0.3, -0.1]])
    _, cache = forward_cache(net, x)
    _, gin = backward(net, cache, np.ones((1, 1)))
    h = 1e-6
    fd = [(forward(net, x + h * e) - forward(net, x - h * e))[0, 0] / (2 * h) for e in np.eye(2)]
    np.testing.assert_allclose(gin[0], fd, rtol=1e-5, atol=1e-8)


def test_ibp_examples():
    # y = relu(2x + 1) on [-1, 1] then identity output
    lo, hi = ibp_forward(relu_net(), np.array([-1.0]), np.array([1.0]))
    assert lo[0] == 0.0 and hi[0] == 3.0
    ident = Mlp([np.eye(2)], [np.zeros(2)])
    lo, hi = ibp_forward(ident, np.array([-1.0, 2.0]), np.array([0.5, 3.0]))
    np.testing.assert_array_equal(lo, [-1.0, 2.0])
    np.testing.assert_array_equal(hi, [0.5, 3.0])


def test_ibp_sound_on_random_nets():
    g = np.random.default_rng(4)
    for _ in range(100):
        sizes = [int(g.integers(1, 4))] + [int(g.integers(1, 65)) for _ in range(int(g.integers(0, 3)))] + [1]
        net = random_net(g, sizes)
        c = g.normal(size=net.in_dim)
        r = g.uniform(0, 1, net.in_dim)
        lo, hi = ibp_forward(net, c - r, c + r)
        xs = g.uniform(c - r, c + r, size=(10 ** 4, net.in_dim))
        y = forward(net, xs)
        assert np.all(y >= lo - 1e-12) and np.all(y <= hi + 1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6), shrink=st.floats(0.0, 1.0))
def test_ibp_monotone_under_shrinking(seed, shrink):
    g = np.random.default_rng(seed)
    net = random_net(g, [2, 8, 8, 1])
    c = g.normal(size=2)
    r = g.uniform(0, 1, 2)
    lo1, hi1 = ibp_forward(net, c - r, c + r)
    off = g.uniform(-1, 1, 2) * r * (1 - shrink)
    lo2, hi2 = ibp_forward(net, c + off - shrink * r, c + off + shrink * r)
    assert np.all(lo2 >= lo1 - 1e-12) and np.all(hi2 <= hi1 + 1e-12)


def test_lipschitz_examples():
    w = np.array([[1.0, -2.0], [3.0, 4.0]])
    assert l1_operator_norm(w) == 6.0
    assert lipschitz_l1(Mlp([w], [np.zeros(2)])) == 6.0
    two = Mlp([w, np.array([[1.0, 1.0]])], [np.zeros(2), np.zeros(1)])
    assert lipschitz_l1(two) == 6.0
    assert lipschitz_l1(Mlp([np.eye(3)], [np.zeros(3)])) == 1.0


def test_lipschitz_bound_valid():
    g = np.random.default_rng(13)
    net = random_net(g, [2, 32, 16, 2])
    a = g.uniform(-1, 1, (10 ** 4, 2))
    b = a + g.normal(0, 0.1, a.shape)
    lhs = np.abs(forward(net, a) - forward(net, b)).sum(axis=1)
    rhs = lipschitz_l1(net) * np.abs(a - b).sum(axis=1)
    assert np.all(lhs <= rhs + 1e-12)


def test_lipschitz_grad_first_max_column():
    w1 = np.array([[1.0, -3.0], [2.0, 0.0]])    # column sums 3, 3 -> first column wins
    w2 = np.array([[0.5, -2.0]])                # column sums 0.5, 2
    net = Mlp([w1, w2], [np.zeros(2), np.zeros(1)])
    g = lipschitz_l1_grad(net)
    np.testing.assert_array_equal(g[0], [[2.0, 0.0], [2.0, 0.0]])
    np.testing.assert_array_equal(g[2], [[0.0, -3.0]])
    # directional check along the gradient of a non-tied layer
    eps = 1e-6
    net2 = Mlp([w1, w2 + eps * np.array([[0.0, -1.0]])], [np.zeros(2), np.zeros(1)])
    assert (lipschitz_l1(net2) - lipschitz_l1(net)) / eps == pytest.approx(3.0)


def test_constant_net():
    net = constant_mlp([2, 4, 1], -7.0)
    np.testing.assert_array_equal(forward(net, np.ones((3, 2)))[:, 0], [-7.0] * 3)
    lo, hi = ibp_forward(net, np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    assert lo[0] == hi[0] == -7.0


def test_adam_minimizes_quadratic():
    p = [np.array([3.0, -2.0])]
    opt = Adam(lr=0.05)
    for _ in range(2000):
        opt.step(p, [2 * p[0]])
    assert np.all(np.abs(p[0]) < 1e-2)


def test_init_deterministic():
    a = init_mlp([2, 16, 1], np.random.default_rng(1))
    b = init_mlp([2, 16, 1], np.random.default_rng(1))
    for x, y in zip(a.params(), b.params()):
        np.testing.assert_array_equal(x, y)
    assert a.sizes == [2, 16, 1]
