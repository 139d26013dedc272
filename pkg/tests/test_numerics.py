import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import sage_va.numerics as nx
from sage_va.errors import ConfigError, ContractError, DimensionError, DomainError
from sage_va.numerics import Tensor


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def brute_conv(x, kernel, dilation):
    """Direct sum over an explicitly padded copy of ``x``."""
    T, c_in = x.shape
    K, _, c_out = kernel.shape
    pad = (K - 1) * dilation // 2
    padded = np.zeros((T + 2 * pad, c_in))
    padded[pad:pad + T] = x
    out = np.zeros((T, c_out))
    for t in range(T):
        for k in range(K):
            for ci in range(c_in):
                for co in range(c_out):
                    out[t, co] += padded[t + k * dilation, ci] * kernel[k, ci, co]
    return out


# -- matmul ---------------------------------------------------------------


def test_matmul_identity_and_hand_case():
    b = np.array([[1.5, -2.0, 3.0], [0.25, 4.0, -1.0]])
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)
    out = nx.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[1], [1]]))
    np.testing.assert_array_equal(out.data, [[3], [7]])


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    assert np.max(np.abs(nx.matmul(Tensor(a), Tensor(b)).data - triple_loop_matmul(a, b))) < 1e-12


def test_matmul_random_shapes_against_triple_loop():
    rng = np.random.default_rng(1)
    for _ in range(200):
        m, k, n = rng.integers(1, 7, size=3)
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
        assert np.max(np.abs(nx.matmul(Tensor(a), Tensor(b)).data - triple_loop_matmul(a, b))) < 1e-10


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax --------------------------------------------------------------


@pytest.mark.parametrize("c", [-7.0, 0.0, 3.5, 1e6])
def test_softmax_uniform_logits(c):
    np.testing.assert_allclose(nx.softmax(Tensor([c] * 4)).data, [0.25] * 4, atol=1e-15)


def test_softmax_hand_case():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_no_overflow():
    y = nx.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(y))
    assert y[0] == pytest.approx(1.0) and y[1] < 1e-300


def test_softmax_rejects_empty():
    with pytest.raises((DomainError, DimensionError)):
        nx.softmax(Tensor(np.zeros(0)))
    with pytest.raises(DomainError):
        nx.softmax(Tensor(1.0))


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=st.floats(-50, 50)),
       st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(v, c):
    y = nx.softmax(Tensor(v)).data
    assert abs(y.sum() - 1.0) < 1e-12
    assert np.all(y > 0) and np.all(y <= 1)
    assert np.max(np.abs(nx.softmax(Tensor(v + c)).data - y)) < 1e-12


# -- conv1d ---------------------------------------------------------------


def identity_kernel(K, C):
    w = np.zeros((K, C, C))
    w[K // 2] = np.eye(C)
    return w


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 20), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)),
       st.sampled_from([1, 3, 5]), st.integers(1, 4))
def test_conv1d_identity_kernel_is_identity(x, K, dilation):
    out = nx.conv1d(Tensor(x), Tensor(identity_kernel(K, x.shape[1])), dilation)
    np.testing.assert_array_equal(out.data, x)


def test_conv1d_hand_case():
    x = Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))
    out = nx.conv1d(x, Tensor(np.ones((3, 1, 1))), 1)
    np.testing.assert_array_equal(out.data[:, 0], [3, 6, 9, 7])


@pytest.mark.parametrize("dilation,T", [(2, 5), (1, 7), (3, 4)])
def test_conv1d_against_padded_brute_force(dilation, T):
    rng = np.random.default_rng(dilation * 10 + T)
    x, w = rng.normal(size=(T, 3)), rng.normal(size=(3, 3, 2))
    out = nx.conv1d(Tensor(x), Tensor(w), dilation).data
    assert np.max(np.abs(out - brute_conv(x, w, dilation))) < 1e-12


def test_conv1d_even_kernel_rejected():
    with pytest.raises(ConfigError):
        nx.conv1d(Tensor(np.ones((4, 1))), Tensor(np.ones((2, 1, 1))), 1)


# -- layer_norm -----------------------------------------------------------


def test_layer_norm_hand_case():
    out = nx.layer_norm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3))).data
    expected = 1.0 / math.sqrt(2.0 / 3.0 + 1e-5)
    np.testing.assert_allclose(out[0], [-expected, 0.0, expected], atol=1e-14)
    assert expected == pytest.approx(1.2247357, abs=1e-7)


def test_layer_norm_constant_row_and_zero_gain():
    x = Tensor(np.full((2, 4), 3.3))
    np.testing.assert_array_equal(nx.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4))).data, 0.0)
    b = np.array([0.5, -1.0, 2.0, 7.0])
    rng = np.random.default_rng(2)
    out = nx.layer_norm(Tensor(rng.normal(size=(6, 4))), Tensor(np.zeros(4)), Tensor(b)).data
    np.testing.assert_array_equal(out, np.tile(b, (6, 1)))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(2, 12)), elements=st.floats(-100, 100)))
def test_layer_norm_moments(x):
    spread = x.max(axis=1) - x.min(axis=1)
    x = x[spread > 1e-3]
    if len(x) == 0:
        return
    D = x.shape[1]
    out = nx.layer_norm(Tensor(x), Tensor(np.ones(D)), Tensor(np.zeros(D))).data
    var = x.var(axis=1)
    assert np.all(np.abs(out.mean(axis=1)) < 1e-10)
    # the eps term shifts the variance by eps / (var + eps)
    np.testing.assert_allclose(out.var(axis=1), var / (var + 1e-5), atol=1e-10)
    big = var > 10.0
    assert np.all(np.abs(out.var(axis=1)[big] - 1.0) < 1e-6)


# -- backward -------------------------------------------------------------


def test_backward_linear_functional():
    x = Tensor([1.0, -2.0, 5.0], requires_grad=True)
    np.testing.assert_array_equal(nx.backward(nx.tsum(x))[x], [1, 1, 1])


def test_backward_constant_composite():
    x = Tensor([0.3, -1.2, 2.0, 0.0], requires_grad=True)
    g = nx.backward(nx.tsum(nx.softmax(x)))[x]
    assert np.max(np.abs(g)) < 1e-15


def test_backward_requires_scalar_loss():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        nx.backward(x * 2.0)


def test_backward_unreachable_leaf_gets_zero():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor(np.ones((2, 2)), requires_grad=True)
    grads = nx.backward(nx.tsum(x * x), wrt=[x, y])
    np.testing.assert_array_equal(grads[y], np.zeros((2, 2)))
    np.testing.assert_array_equal(grads[x], [2.0, 4.0])


def test_graph_is_topologically_ordered():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = nx.relu(a @ a)
    loss = nx.tsum(b * b + a)
    graph = nx.Graph(loss)
    position = {id(t): i for i, t in enumerate(graph.order)}
    for node in graph.nodes:
        for p in node._parents:
            if p.requires_grad:
                assert position[id(p)] < position[id(node)]


def _primitive_cases():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(4, 3)))
    k = Tensor(rng.normal(size=(3, 4, 2)))
    gam, bet = Tensor(rng.normal(size=4)), Tensor(rng.normal(size=4))
    c = Tensor(rng.normal(size=(5, 4)))
    pos = Tensor(rng.uniform(1.0, 2.0, size=(5, 4)))
    return {
        "matmul": lambda x: nx.tsum(nx.tanh(x @ w)),
        "softmax": lambda x: nx.tsum(nx.softmax(x) * c),
        "softmax_vec": lambda x: nx.tsum(nx.softmax(x[:, 0]) * c[:, 1]),
        "conv1d_d1": lambda x: nx.tsum(nx.tanh(nx.conv1d(x, k, 1))),
        "conv1d_d2": lambda x: nx.tsum(nx.conv1d(x, k, 2) * nx.conv1d(x, k, 2)),
        "layer_norm": lambda x: nx.tsum(nx.layer_norm(x, gam, bet) * c),
        "mul_add_sub": lambda x: nx.tsum((x * c + x) - c * x * x),
        "div": lambda x: nx.tsum(x / pos + c / (x * x + 1.0)),
        "exp_tanh": lambda x: nx.tsum(nx.exp(nx.tanh(x))),
        "mean_axis": lambda x: nx.tsum(nx.mean(x, axis=0) * nx.mean(x * x, axis=0)),
        "broadcast": lambda x: nx.tsum((x - nx.mean(x, axis=0, keepdims=True)) * c),
        "transpose": lambda x: nx.tsum(nx.tanh(x.T @ c)),
        "concat": lambda x: nx.tsum(nx.tanh(nx.concat([x, x * x], axis=1)) * nx.concat([c, c], axis=1)),
        "take_rows": lambda x: nx.tsum(nx.tanh(nx.take_rows(x, [0, 2, 2, 4])) * c[:4]),
        "slice": lambda x: nx.tsum(nx.tanh(x[1:4, 1:3])),
        "reshape": lambda x: nx.tsum(nx.tanh(nx.reshape(x, (2, 10))) * nx.reshape(c, (2, 10))),
    }


@pytest.mark.parametrize("name", sorted(_primitive_cases()))
def test_primitive_gradients_match_central_differences(name):
    f = _primitive_cases()[name]
    x = Tensor(np.random.default_rng(11).normal(size=(5, 4)))
    assert nx.grad_check(f, x, step=1e-5) < 1e-6


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(3)
    x = Tensor(rng.choice([-1.0, 1.0], size=(5, 4)) * rng.uniform(0.2, 1.0, size=(5, 4)))
    assert nx.grad_check(lambda t: nx.tsum(nx.relu(t) * nx.relu(t)), x) < 1e-6


# -- grad_check -----------------------------------------------------------


def test_grad_check_quadratic():
    x = Tensor([1.0, -2.0])
    assert nx.grad_check(lambda t: nx.tsum(t * t), x, 1e-5) < 1e-9


def test_grad_check_detects_wrong_backward(monkeypatch):
    x = Tensor(np.random.default_rng(5).normal(size=6))
    c = Tensor(np.arange(6.0))
    f = lambda t: nx.tsum(nx.softmax(t) * c)  # noqa: E731
    assert nx.grad_check(f, x) < 1e-6
    monkeypatch.setattr(nx, "_softmax_vjp", lambda y, g: y * g)
    assert nx.grad_check(f, x) > 1e-2


def test_relative_error_floor():
    assert nx.relative_error(0.0, 0.0) == 0.0
    assert nx.relative_error(1.0, 1.0 + 1e-9) < 1e-9
    assert nx.relative_error(1e-12, 0.0) == pytest.approx(1e-4)


def test_tensor_forward_is_finite_and_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 3.0
    y = nx.softmax(Tensor(np.array([700.0, -700.0, 0.0])))
    assert np.all(np.isfinite(y.data))
