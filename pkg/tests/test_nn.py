import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from knowru.nn import (
    AdamState,
    DimensionError,
    MlpNet,
    SnapshotFormatError,
    StateError,
    adam_step,
    adam_update,
    ce_loss,
    clip_by_global_norm,
    dumps_snapshot,
    grad_check,
    kd_loss,
    kl_divergence,
    load_snapshot,
    loads_snapshot,
    mse_loss,
    save_snapshot,
    softmax_t,
)

import oracles

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def logits(rows=5, cols=3):
    return arrays(np.float64, (rows, cols), elements=finite)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -------------------------------------------------------------- network


def test_forward_shape_and_dimension_error(rng):
    net = MlpNet.init([4, 8, 5], rng)
    assert net.forward(rng.normal(size=(4, 7))).shape == (5, 7)
    assert net.forward(rng.normal(size=4)).shape == (5, 1)
    with pytest.raises(DimensionError):
        net.forward(rng.normal(size=(3, 2)))


def test_init_is_glorot_uniform_with_zero_bias(rng):
    net = MlpNet.init([30, 50, 5], rng)
    lim = math.sqrt(6 / 80)
    assert np.all(np.abs(net.weights[0]) <= lim)
    assert np.abs(net.weights[0]).max() > 0.9 * lim
    assert all(not b.any() for b in net.biases)


def test_backward_before_forward_is_state_error(rng):
    with pytest.raises(StateError):
        MlpNet.init([3, 2], rng).backward(np.zeros((2, 1)))


def test_zero_upstream_gradient_gives_zero_gradients(rng):
    net = MlpNet.init([4, 6, 5], rng)
    net.forward(rng.normal(size=(4, 3)))
    g = net.backward(np.zeros((5, 3)))
    assert all(not a.any() for a in g.arrays())


def test_linear_layer_sum_of_logits(rng):
    net = MlpNet.init([3, 2], rng)
    x = rng.normal(size=(3, 1))
    net.forward(x)
    g = net.backward(np.ones((2, 1)))
    np.testing.assert_array_equal(g.d_weights[0], np.vstack([x.T, x.T]))
    np.testing.assert_array_equal(g.d_biases[0], np.ones((2, 1)))


def test_grad_check_linear_quadratic(rng):
    net = MlpNet.init([4, 3], rng)
    target = rng.normal(size=(3, 2))
    assert grad_check(net, lambda y: mse_loss(y, target), rng.normal(size=(4, 2))) < 1e-7


def test_grad_check_tanh_four_layers(rng):
    net = MlpNet.init([5, 7, 6, 4, 3], rng, "tanh")
    target = rng.normal(size=(3, 4))
    assert grad_check(net, lambda y: mse_loss(y, target), rng.normal(size=(5, 4))) < 1e-4


def test_grad_check_relu_resamples_away_from_kinks(rng):
    net = MlpNet.init([5, 16, 16, 3], rng)
    target = rng.normal(size=(3, 4))
    # zero input puts every hidden unit exactly on a kink (zero biases)
    assert grad_check(net, lambda y: mse_loss(y, target), np.zeros((5, 4)), rng=rng) < 1e-4


def test_copy_is_independent(rng):
    net = MlpNet.init([3, 4, 2], rng)
    twin = net.copy()
    twin.weights[0] += 1
    assert not np.array_equal(net.weights[0], twin.weights[0])


# --------------------------------------------------------------- losses


def test_softmax_examples():
    np.testing.assert_allclose(softmax_t([0.0, 0.0, 0.0]), [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(softmax_t([math.log(2), 0.0]), [2 / 3, 1 / 3], atol=1e-15)
    assert np.all(np.abs(softmax_t([5.0, -5.0], 1e6) - 0.5) < 1e-5)
    with pytest.raises(ValueError):
        softmax_t([1.0, 2.0], 0.0)


@given(logits(), finite, st.floats(0.1, 10))
def test_softmax_shift_invariant_and_normalized(x, c, temp):
    p = softmax_t(x, temp)
    assert np.all(p > 0)
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax_t(x + c, temp), p, atol=1e-12)


def test_mse_examples(rng):
    v, g = mse_loss([1.0, 2.0], [1.0, 2.0])
    assert v == 0 and not g.any()
    assert mse_loss([1.0, 2.0], [3.0, 4.0])[0] == 4.0
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    assert abs(mse_loss(a, b)[0] - oracles.mse(a, b)) < 1e-12
    with pytest.raises(DimensionError):
        mse_loss(np.zeros(2), np.zeros(3))


@given(logits(), logits())
def test_mse_symmetric(a, b):
    assert mse_loss(a, b)[0] == mse_loss(b, a)[0]


def test_kl_examples(rng):
    assert kl_divergence([0.2, 0.8], [0.2, 0.8]) == 0
    assert abs(kl_divergence([1.0, 0.0], [0.5, 0.5]) - math.log(2)) < 1e-12
    p, q = rng.dirichlet(np.ones(5)), rng.dirichlet(np.ones(5))
    assert abs(kl_divergence(p, q) - oracles.kl(p, q)) < 1e-10
    assert abs(kl_divergence(q, p) - oracles.kl(q, p)) < 1e-10
    assert abs(kl_divergence(p, q) - kl_divergence(q, p)) > 1e-6
    with pytest.raises(ValueError):
        kl_divergence([1.2, -0.2], [0.5, 0.5])
    with pytest.raises(ValueError):
        kl_divergence([0.5, 0.6], [0.5, 0.5])


def test_kl_floors_zero_q():
    assert kl_divergence([0.5, 0.5], [1.0, 0.0]) == pytest.approx(0.5 * math.log(0.5) + 0.5 * math.log(0.5 / 1e-12))


@given(logits(), st.floats(0.2, 8))
def test_kd_self_is_zero(x, temp):
    v, g = kd_loss(x, x, temp)
    assert v == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(g)) < 1e-12


def test_kd_composes_softmax_and_kl():
    v, _ = kd_loss([1.0, 0.0], [0.0, 1.0], 1.0)
    assert abs(v - oracles.kl(oracles.softmax([1.0, 0.0]), oracles.softmax([0.0, 1.0]))) < 1e-12
    temp = 3.0
    v, _ = kd_loss([1.0, 0.0, -2.0], [0.0, 1.0, 0.5], temp)
    ref = temp**2 * oracles.kl(oracles.softmax([1.0, 0.0, -2.0], temp), oracles.softmax([0.0, 1.0, 0.5], temp))
    assert abs(v - ref) < 1e-12


def test_kd_argument_order_is_student_first():
    s, t = [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]
    assert kd_loss(s, t)[0] == pytest.approx(oracles.kl(oracles.softmax(s), oracles.softmax(t)), abs=1e-12)
    assert kd_loss(s, t)[0] != pytest.approx(oracles.kl(oracles.softmax(t), oracles.softmax(s)), abs=1e-6)


def test_ce_minimized_at_teacher(rng):
    t = rng.normal(size=(5, 2))
    at_teacher = ce_loss(t, t, 2.0)
    assert np.max(np.abs(at_teacher[1])) < 1e-12
    assert ce_loss(t + rng.normal(size=t.shape), t, 2.0)[0] > at_teacher[0]


# ------------------------------------------------------------ optimizer


def test_adam_zero_gradient_fixed_point(rng):
    net = MlpNet.init([3, 2], rng)
    before = [p.copy() for p in net.params()]
    state = AdamState.for_params(net.params())
    net.forward(rng.normal(size=(3, 1)))
    grads = net.backward(np.zeros((2, 1)))
    adam_step(net, grads, state)
    assert state.step_count == 1
    assert all(np.array_equal(a, b) for a, b in zip(before, net.params()))


def test_adam_first_step_is_lr_sign(rng):
    net = MlpNet.init([3, 2], rng)
    before = [p.copy() for p in net.params()]
    state = AdamState.for_params(net.params(), 1e-3)
    net.forward(rng.normal(size=(3, 4)))
    grads = net.backward(rng.normal(size=(2, 4)))
    adam_step(net, grads, state)
    for b, a, g in zip(before, net.params(), grads.arrays()):
        np.testing.assert_allclose(a - b, -1e-3 * np.sign(g), atol=1e-9)


def test_adam_quadratic_descent():
    x = np.array([3.0])
    state = AdamState.for_params([x], 0.05)
    losses = []
    for _ in range(100):
        losses.append(float(x[0] ** 2))
        adam_update([x], [2 * x], state)
    assert all(b < a for a, b in zip(losses[10:], losses[11:]))


def test_adam_shape_mismatch(rng):
    net = MlpNet.init([3, 2], rng)
    state = AdamState.for_params(net.params())
    with pytest.raises(DimensionError):
        adam_update(net.params(), [np.zeros((1, 1)), np.zeros((2, 1))], state)


def test_clip_by_global_norm():
    grads = [np.array([3.0]), np.array([4.0])]
    clipped, norm = clip_by_global_norm(grads, 0.5)
    assert norm == 5.0
    assert math.isclose(math.sqrt(sum(float(g[0]) ** 2 for g in clipped)), 0.5)
    same, _ = clip_by_global_norm(grads, 10.0)
    assert same is grads


# ------------------------------------------------------------ snapshots


def test_snapshot_round_trip_bit_exact(rng, tmp_path):
    net = MlpNet.init([4, 6, 5], rng, "tanh")
    for b in net.biases:
        b += rng.normal(size=b.shape)
    path = save_snapshot(net, tmp_path / "a" / "actor.snap")
    back = load_snapshot(path)
    assert back.layer_sizes == net.layer_sizes and back.hidden_activation == "tanh"
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), back.params()))
    assert dumps_snapshot(back) == path.read_text()


def test_snapshot_layout(rng):
    text = dumps_snapshot(MlpNet.init([2, 3, 1], rng))
    lines = text.splitlines()
    assert lines[:3] == ["MLPSNAPSHOT v1", "layers: 2 3 1", "activation: relu"]
    assert [ln.split()[0] for ln in lines[3:]] == ["W0", "b0", "W1", "b1"]
    assert len(lines[3].split()) == 1 + 6


@pytest.mark.parametrize(
    "text",
    [
        "",
        "NOT A SNAPSHOT\n",
        "MLPSNAPSHOT v1\nlayers: 2 1\n",
        "MLPSNAPSHOT v1\nlayers: 2 1\nactivation: relu\nW0 1 2\n",
        "MLPSNAPSHOT v1\nlayers: 2 1\nactivation: relu\nW0 1 x\nb0 0\n",
        "MLPSNAPSHOT v1\nlayers: 2 1\nactivation: relu\nW0 1 2 3\nb0 0\n",
    ],
)
def test_snapshot_format_errors(text):
    with pytest.raises(SnapshotFormatError):
        loads_snapshot(text)


@settings(max_examples=25)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2**31))
def test_snapshot_round_trip_property(sizes, seed):
    net = MlpNet.init(sizes, np.random.default_rng(seed))
    back = loads_snapshot(dumps_snapshot(net))
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), back.params()))


def test_repeated_forward_is_bit_identical(rng):
    net = MlpNet.init([4, 8, 3], rng)
    x = rng.normal(size=(4, 5))
    assert np.array_equal(net.forward(x), net.forward(x))
