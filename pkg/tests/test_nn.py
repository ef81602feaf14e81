import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from psrotsp import nn
from psrotsp.errors import ShapeError
from reference import central_difference, max_relative_error


def make_net(sizes, acts, seed=0):
    return nn.DenseNet.init(sizes, acts, np.random.default_rng(seed))


def test_zero_identity_net_outputs_zero():
    net = nn.DenseNet([nn.Layer(np.zeros((3, 2)), np.zeros(2))])
    assert np.array_equal(net(np.ones(3)), np.zeros(2))


def test_hand_arithmetic():
    net = nn.DenseNet([nn.Layer([[2.0]], [1.0])])
    assert net(np.array([3.0]))[0] == 7.0


def test_sigmoid_codomain():
    net = make_net([4, 8, 3], ["relu", "sigmoid"], 1)
    out = net(np.random.default_rng(0).normal(size=(50, 4)) * 10)
    assert np.all((out > 0) & (out < 1))


def test_input_dim_mismatch():
    with pytest.raises(ShapeError):
        make_net([3, 2], ["identity"])(np.ones(4))


def test_layers_must_chain():
    with pytest.raises(ShapeError):
        nn.DenseNet([nn.Layer(np.zeros((2, 3)), np.zeros(3)), nn.Layer(np.zeros((4, 1)), np.zeros(1))])


def loss_and_grads(net, x, w):
    out, cache = nn.forward(net, x)
    grads, gin = nn.backward(net, cache, w)
    return float((out * w).sum()), grads, gin


def test_backward_matches_finite_differences_small_net():
    net = make_net([2, 4, 2], ["relu", "identity"], 3)
    rng = np.random.default_rng(5)
    x, w = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
    _, grads, _ = loss_and_grads(net, x, w)

    def f(params):
        return float((net.with_params(params)(x) * w).sum())

    num = central_difference(f, net.params(), h=1e-5)
    assert max_relative_error(grads, num) < 1e-5


@given(
    st.lists(st.integers(1, 5), min_size=2, max_size=4),
    st.lists(st.sampled_from(nn.ACTIVATIONS), min_size=3, max_size=3),
    st.integers(0, 10_000),
)
def test_backward_property(sizes, acts, seed):
    net = make_net(sizes, acts, seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, sizes[0]))
    w = rng.normal(size=(3, sizes[-1]))
    _, grads, gin = loss_and_grads(net, x, w)

    def f(params):
        return float((net.with_params(params)(x) * w).sum())

    num = central_difference(f, net.params(), h=1e-6)
    num_in = central_difference(lambda p: float((net(p[0]) * w).sum()), [x], h=1e-6)[0]
    # a ReLU kink inside the stencil makes the difference quotient meaningless
    pre = nn.forward(net, x)[1].pre
    near_kink = any(np.any(np.abs(z) < 1e-4) for z, layer in zip(pre, net.layers) if layer.activation == "relu")
    if not near_kink:
        assert max_relative_error(grads, num) < 1e-4
        assert max_relative_error([gin], [num_in]) < 1e-4


def test_zero_output_gradient():
    net = make_net([3, 5, 2], ["relu", "sigmoid"], 2)
    _, cache = nn.forward(net, np.ones((4, 3)))
    grads, gin = nn.backward(net, cache, np.zeros((4, 2)))
    assert all(not g.any() for g in grads) and not gin.any()


def test_backward_linear_in_output_gradient():
    net = make_net([3, 5, 2], ["relu", "sigmoid"], 2)
    x = np.random.default_rng(1).normal(size=(4, 3))
    g = np.random.default_rng(2).normal(size=(4, 2))
    _, cache = nn.forward(net, x)
    one, _ = nn.backward(net, cache, g)
    two, _ = nn.backward(net, cache, 2 * g)
    for a, b in zip(one, two):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-13, atol=0)


def test_stale_cache_rejected():
    a = make_net([3, 5, 2], ["relu", "identity"])
    b = make_net([3, 4, 2], ["relu", "identity"])
    _, cache = nn.forward(a, np.ones(3))
    with pytest.raises(ShapeError):
        nn.backward(b, cache, np.ones(2))


def test_softmax_examples():
    np.testing.assert_allclose(nn.softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(nn.softmax([np.log(2.0), 0.0]), [2 / 3, 1 / 3])
    big = nn.softmax([1000.0, 0.0])
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(1.0) and big[1] < 1e-300


def test_softmax_empty():
    with pytest.raises(ShapeError):
        nn.softmax([])


@given(hnp.arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e6, 1e6)))
def test_softmax_simplex(z):
    p = nn.softmax(z)
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-12
    np.testing.assert_allclose(np.exp(nn.log_softmax(z)), p, atol=1e-12)


def test_adam_zero_gradient_is_identity():
    p = [np.array([1.0, -2.0])]
    out = nn.adam_step(nn.AdamState(weight_decay=0.0), p, [np.zeros(2)])
    np.testing.assert_array_equal(out[0], p[0])


def test_adam_zero_lr_is_identity():
    p = [np.array([1.0, -2.0])]
    out = nn.adam_step(nn.AdamState(lr=0.0), p, [np.array([3.0, 4.0])])
    np.testing.assert_array_equal(out[0], p[0])


def test_adam_first_step_by_hand():
    g = np.array([0.5, -2.0, 1e-3])
    p = np.array([1.0, 1.0, 1.0])
    st_ = nn.AdamState(lr=0.1, weight_decay=0.0)
    out = nn.adam_step(st_, [p], [g])[0]
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    np.testing.assert_allclose(out, p - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8), rtol=1e-14)
    np.testing.assert_allclose(out, p - 0.1 * np.sign(g), rtol=1e-4)


def test_adam_weight_decay_and_lr_schedule():
    st_ = nn.AdamState(lr=0.1, weight_decay=0.5, lr_decay=0.5)
    out = nn.adam_step(st_, [np.array([2.0])], [np.zeros(1)])[0]
    assert out[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)
    st_.end_epoch()
    assert st_.lr == pytest.approx(0.05)


def test_adam_deterministic_and_shape_checked():
    rng = np.random.default_rng(0)
    params = [rng.normal(size=(2, 3)), rng.normal(size=3)]
    grads = [rng.normal(size=(2, 3)), rng.normal(size=3)]
    a = nn.adam_step(nn.AdamState(), params, grads)
    b = nn.adam_step(nn.AdamState(), params, grads)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    with pytest.raises(ShapeError):
        nn.adam_step(nn.AdamState(), params, grads[::-1])


def test_json_round_trip_and_flatten():
    net = make_net([2, 3, 1], ["relu", "sigmoid"], 9)
    back = nn.DenseNet.from_json_obj(net.to_json_obj())
    x = np.random.default_rng(0).random((5, 2))
    np.testing.assert_array_equal(net(x), back(x))
    flat = nn.flatten(net.params())
    assert all(np.array_equal(a, b) for a, b in zip(nn.unflatten(flat, net.params()), net.params()))
