import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from solartrade.exceptions import ConfigurationError, ContractViolation, ValidationError
from solartrade.nn import (
    AdamState,
    Mlp,
    adam_step,
    backward,
    categorical_sample,
    finite_diff_check,
    load_mlp,
    mlp_forward,
    mse_loss,
    read_mlp,
    save_mlp,
    softmax,
    write_mlp,
)


def loop_forward(net, x):
    """Straight-line oracle: explicit loops over rows and columns."""
    h = [float(v) for v in x]
    for w, b, act in zip(net.weights, net.biases, net.activations):
        out = []
        for i in range(w.shape[0]):
            z = b[i]
            for j in range(w.shape[1]):
                z += w[i, j] * h[j]
            out.append(math.tanh(z) if act == "tanh" else max(z, 0.0) if act == "relu" else z)
        h = out
    return np.array(h)


def test_identity_layer_passes_input_through():
    net = Mlp([np.eye(2)], [np.zeros(2)], ["identity"])
    np.testing.assert_array_equal(mlp_forward(net, [3.0, -1.0]), [3.0, -1.0])


def test_zero_weights_leave_bias_only():
    net = Mlp([np.zeros((1, 3))], [np.array([2.0])], ["tanh"])
    assert mlp_forward(net, [5.0, -7.0, 1.0])[0] == pytest.approx(0.96402758, abs=1e-8)


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(7)
    net = Mlp.init([5, 7, 3], ["tanh", "identity"], rng)
    net.biases[0] += rng.standard_normal(7)
    x = rng.standard_normal(5)
    np.testing.assert_allclose(net.forward(x), loop_forward(net, x), rtol=0, atol=1e-12)


def test_batch_forward_equals_row_by_row():
    rng = np.random.default_rng(8)
    net = Mlp.init([4, 6, 2], ["relu", "tanh"], rng)
    X = rng.standard_normal((9, 4))
    batch = net.forward(X)
    for i in range(9):
        np.testing.assert_allclose(batch[i], net.forward(X[i]), atol=1e-14)


def test_layer_dimensions_must_chain():
    with pytest.raises(ConfigurationError):
        Mlp([np.zeros((3, 2)), np.zeros((1, 4))], [np.zeros(3), np.zeros(1)], ["tanh", "identity"])


def test_linear_backward_is_input():
    net = Mlp([np.array([[0.7]])], [np.array([0.1])], ["identity"])
    net.forward([2.5])
    grads, _ = backward(net, np.array([1.0]))
    assert grads[0][0, 0] == 2.5
    assert grads[1][0] == 1.0


def test_zero_upstream_gradient_gives_zero_grads():
    rng = np.random.default_rng(0)
    net = Mlp.init([3, 4, 2], "tanh", rng)
    net.forward(rng.standard_normal(3))
    grads, gin = net.backward(np.zeros(2))
    assert all(not np.any(g) for g in grads) and not np.any(gin)


def test_backward_without_forward_is_rejected():
    net = Mlp.init([2, 1], "identity", np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        net.backward(np.ones(1))


@pytest.mark.parametrize("acts", [["tanh", "tanh", "identity"], ["relu", "tanh", "identity"]])
def test_backward_matches_finite_differences(acts):
    rng = np.random.default_rng(3)
    net = Mlp.init([4, 6, 5, 2], acts, rng)
    X = rng.standard_normal((6, 4))
    c = rng.standard_normal((6, 2))
    net.forward(X)
    grads, _ = net.backward(c)
    err = finite_diff_check(lambda: float(np.sum(c * net.forward(X))), net.params, grads, 1e-5)
    assert err < 1e-4


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    net = Mlp.init([3, 5, 1], "tanh", rng)
    x = rng.standard_normal(3)
    net.forward(x)
    _, gin = net.backward(np.ones(1))
    num = np.array([(net.forward(x + e * 1e-6)[0] - net.forward(x - e * 1e-6)[0]) / 2e-6 for e in np.eye(3)])
    np.testing.assert_allclose(gin, num, rtol=1e-6)


def test_adam_zero_gradient_is_a_no_op():
    p = [np.array([1.0, -2.0])]
    state = AdamState.for_params(p)
    assert adam_step(p, [np.zeros(2)], state)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_is_lr_times_sign():
    p = [np.array([0.0])]
    state = AdamState.for_params(p, lr=0.001)
    adam_step(p, [np.array([1.0])], state)
    assert p[0][0] == pytest.approx(-0.001, rel=1e-6)


def test_adam_descends_quadratic():
    w = [np.array([1.0])]
    state = AdamState.for_params(w, lr=0.01)
    history = [1.0]
    for _ in range(10):
        adam_step(w, [2.0 * w[0]], state)
        history.append(float(w[0][0]))
    assert all(b < a for a, b in zip(history, history[1:]))
    assert 0 < history[-1] < 1


def test_adam_moments_mirror_shapes_and_step_counts():
    rng = np.random.default_rng(0)
    net = Mlp.init([3, 4, 2], "tanh", rng)
    state = AdamState.for_params(net.params)
    assert [m.shape for m in state.m] == [p.shape for p in net.params]
    for k in range(1, 4):
        adam_step(net.params, [np.ones_like(p) for p in net.params], state)
        assert state.step == k


def test_adam_skips_non_finite_gradients():
    p = [np.array([1.0])]
    state = AdamState.for_params(p)
    assert not adam_step(p, [np.array([np.nan])], state)
    assert p[0][0] == 1.0 and state.skipped == 1


def test_softmax_cases():
    np.testing.assert_array_equal(softmax(np.array([0.0, 0.0])), [0.5, 0.5])
    out = softmax(np.array([1000.0, 0.0]))
    assert np.all(np.isfinite(out)) and out[0] == pytest.approx(1.0) and out[1] < 1e-300


@given(st.lists(st.floats(-30, 30), min_size=2, max_size=8))
@settings(max_examples=60, deadline=None)
def test_softmax_preserves_exponent_ratios(logits):
    logits = np.array(logits)
    p = softmax(logits)
    assert abs(p.sum() - 1.0) < 1e-12
    i, j = 0, len(logits) - 1
    expected = math.exp(logits[i] - logits[j])
    assert abs(p[i] / p[j] - expected) <= 1e-9 * max(1.0, expected)


def test_categorical_sample_degenerate_and_fair():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert categorical_sample(np.array([1.0, 0.0]), rng) == (0, 0.0)
    draws = [categorical_sample(np.array([0.5, 0.5]), rng)[0] for _ in range(10_000)]
    assert 0.48 <= draws.count(0) / 10_000 <= 0.52


def test_categorical_sample_is_seeded():
    a = [categorical_sample(np.array([0.3, 0.7]), np.random.default_rng(5)) for _ in range(3)]
    b = [categorical_sample(np.array([0.3, 0.7]), np.random.default_rng(5)) for _ in range(3)]
    assert a == b


def test_categorical_sample_rejects_bad_probabilities():
    with pytest.raises(ContractViolation):
        categorical_sample(np.array([0.6, 0.6]), np.random.default_rng(0))
    with pytest.raises(ContractViolation):
        categorical_sample(np.array([1.2, -0.2]), np.random.default_rng(0))


def test_mse_cases():
    assert mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))[0] == 0.0
    loss, grad = mse_loss(np.array([2.0]), np.array([0.0]))
    assert loss == 4.0 and grad.tolist() == [4.0]
    rng = np.random.default_rng(2)
    p, t = rng.standard_normal(11), rng.standard_normal(11)
    total = 0.0
    for a, b in zip(p, t):
        total += (a - b) ** 2
    assert abs(mse_loss(p, t)[0] - total / 11) < 1e-12


def test_finite_diff_checker_sanity():
    w = [np.array([1.5, -0.5])]
    c = np.array([2.0, 3.0])
    linear = lambda: float(c @ w[0])  # noqa: E731
    assert finite_diff_check(linear, w, [c.copy()], 1e-5) < 1e-10
    assert finite_diff_check(linear, w, [2.0 * c], 1e-5) == pytest.approx(1.0, abs=1e-6)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(11)
    net = Mlp.init([4, 8, 8, 2], ["tanh", "relu", "identity"], rng)
    save_mlp(tmp_path / "net.spnn", net)
    back = load_mlp(tmp_path / "net.spnn")
    assert back.activations == net.activations
    for a, b in zip(net.params, back.params):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_streams_can_hold_several_networks():
    rng = np.random.default_rng(12)
    nets = [Mlp.init([2, 3, 1], "tanh", rng), Mlp.init([1, 5], "identity", rng)]
    buf = io.BytesIO()
    for n in nets:
        write_mlp(buf, n)
    buf.seek(0)
    for n in nets:
        assert read_mlp(buf).sizes == n.sizes


def test_corrupt_checkpoints_are_rejected(tmp_path):
    path = tmp_path / "bad.spnn"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValidationError):
        load_mlp(path)
    net = Mlp.init([3, 2], "tanh", np.random.default_rng(0))
    save_mlp(path, net)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ValidationError):
        load_mlp(path)
