import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from solartrade.data import DayRecord, Dataset
from solartrade.env import HOLD, SELL, TradingEnv
from solartrade.exceptions import ConfigurationError, ValidationError
from solartrade.forecast import (
    BestDayTrader,
    MoEForecaster,
    MoENetwork,
    SolitonEmbedding,
    TableEmbedding,
    augment_long,
    best_day_policy,
    gate_topk,
    importance_penalty,
    load_forecaster,
    moe_forward,
    save_forecaster,
    soliton_embed,
    table_embed,
    train_moe,
)
from solartrade.gradcheck import check_moe, check_soliton, check_table
from solartrade.nn import Mlp, finite_diff_check

from conftest import make_dataset


class FixedRng:
    """Stands in for a generator whose uniform draws are all at the lower bound."""

    def uniform(self, low, high, size=None):
        return np.full(size, low) if size else low


def constant_net(dim, value, last="identity"):
    return Mlp([np.zeros((dim, 1))], [np.full(dim, value)], [last])


def test_augment_examples():
    rng = np.random.default_rng(0)
    draws = np.array([augment_long(5, rng) for _ in range(1000)])
    assert draws.min() >= 5.0 and draws.max() < 5.99
    assert augment_long(5, FixedRng()) == 5.0
    mean_offset = augment_long(np.zeros(10_000), np.random.default_rng(1)).mean()
    assert abs(mean_offset - 0.495) < 0.02
    with pytest.raises(ValidationError):
        augment_long(-1, rng)


def test_soliton_zero_phase_collapses_to_amplitude():
    amp = np.array([1.5, -2.0, 0.25])
    emb = SolitonEmbedding(Mlp([np.zeros((3, 1))], [amp], ["identity"]), constant_net(3, 0.0, "tanh"))
    np.testing.assert_allclose(soliton_embed(123.4, emb), amp, atol=1e-15)


def test_soliton_scalar_value():
    emb = SolitonEmbedding(constant_net(1, 2.0), constant_net(1, math.atanh(0.5), "tanh"))
    expected = 2.0 / math.cos(0.5) ** 2 + math.sin(0.5 / math.cos(0.5))
    got = soliton_embed(10.0, emb)[0]
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(3.13626, abs=1e-4)  # quoted figure is rounded; exact value 3.136312


@pytest.mark.parametrize("tail,profile", [("sin_of_ratio", "sec"), ("tan", "sec"), ("sin_of_ratio", "sech")])
def test_soliton_gradients(tail, profile):
    assert check_soliton(np.random.default_rng(0), dim=16, hidden=8, tail=tail, profile=profile) < 1e-4


def test_soliton_rejects_bad_variants():
    rng = np.random.default_rng(0)
    with pytest.raises(ConfigurationError):
        SolitonEmbedding.init(4, 4, rng, tail="cosh")
    with pytest.raises(ConfigurationError):
        SolitonEmbedding(Mlp.init([1, 4], "identity", rng), Mlp.init([1, 4], "identity", rng))


def test_table_lookup():
    emb = TableEmbedding.init(8, np.random.default_rng(0))
    np.testing.assert_array_equal(table_embed(0, emb), emb.table[0])
    with pytest.raises(ValidationError):
        table_embed(366, emb)
    assert check_table(np.random.default_rng(1), dim=8) < 1e-4


def test_table_rows_update_independently():
    emb = TableEmbedding.init(4, np.random.default_rng(0))
    row9 = emb.table[9].copy()
    emb.forward([3])
    emb.table -= 0.1 * emb.backward(np.ones((1, 4)))[0]
    np.testing.assert_array_equal(emb.table[9], row9)
    assert not np.array_equal(emb.table[3], row9)


def test_gate_examples():
    np.testing.assert_array_equal(gate_topk([2.0, 1.0, 0.0], 1), [[1.0, 0.0, 0.0]])
    w = gate_topk([2.0, 1.0, 0.0], 2)[0]
    np.testing.assert_allclose(w, [0.7310585786, 0.2689414214, 0.0], atol=1e-9)
    logits = np.array([0.3, -1.0, 2.0])
    dense = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(gate_topk(logits, 3)[0], dense, atol=1e-15)
    np.testing.assert_array_equal(gate_topk([1.0, 1.0, 1.0], 1), [[1.0, 0.0, 0.0]])
    with pytest.raises(ConfigurationError):
        gate_topk([1.0, 2.0], 3)


@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=50, deadline=None)
def test_gate_sparsity(k, seed):
    logits = np.random.default_rng(seed).standard_normal((20, 6)) * 3
    w = gate_topk(logits, k)
    assert np.all(np.count_nonzero(w, axis=1) == k)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def small_moe(rng, kind="soliton", dim=6, experts=4, k=2):
    emb = SolitonEmbedding.init(dim, 5, rng) if kind == "soliton" else TableEmbedding.init(dim, rng)
    return MoENetwork(emb, Mlp.init([dim, experts], "identity", rng),
                      [Mlp.init([dim, 5, 1], ["relu", "identity"], rng) for _ in range(experts)], k)


def test_moe_forward_matches_loop():
    rng = np.random.default_rng(3)
    net = small_moe(rng)
    x = rng.uniform(0, 365, 7)
    pred = moe_forward(net, x)
    for i, xi in enumerate(x):
        e = net.embedding.forward([xi])[0]
        w = gate_topk(net.gate.forward(e), net.k)[0]
        total = 0.0
        for j, expert in enumerate(net.experts):
            if w[j]:
                total += w[j] * expert.forward(e)[0]
        assert pred[i] == pytest.approx(total, abs=1e-12)


def test_moe_k1_and_identical_experts():
    rng = np.random.default_rng(4)
    net = small_moe(rng, k=1)
    x = np.array([12.0, 200.0])
    pred = net.forward(x)
    chosen = np.argmax(net.gate_weights(x), axis=1)
    emb = net.embedding.forward(x)
    for i in range(2):
        assert pred[i] == pytest.approx(net.experts[chosen[i]].forward(emb[i])[0], abs=1e-14)
    twin = small_moe(rng, k=2)
    for e in twin.experts[1:]:
        e.weights = [w.copy() for w in twin.experts[0].weights]
        e.biases = [b.copy() for b in twin.experts[0].biases]
    base = twin.forward(x)
    twin.gate.weights[0] = rng.standard_normal(twin.gate.weights[0].shape) * 10
    np.testing.assert_allclose(twin.forward(x), base, atol=1e-12)


@pytest.mark.parametrize("kind", ["soliton", "table"])
def test_moe_end_to_end_gradient(kind):
    assert check_moe(np.random.default_rng(5), kind) < 1e-4


def test_importance_penalty_gradient():
    rng = np.random.default_rng(6)
    w = gate_topk(rng.standard_normal((9, 4)), 2)
    holder = [w.copy()]
    _, grad = importance_penalty(holder[0])
    assert finite_diff_check(lambda: importance_penalty(holder[0])[0], holder, [grad], 1e-6) < 1e-5
    balanced = np.full((4, 4), 0.25)
    assert importance_penalty(balanced)[0] == pytest.approx(0.0, abs=1e-15)


def test_best_day_examples():
    class Oracle:
        def __init__(self, prices):
            self.prices = np.asarray(prices, dtype=float)

        def predict(self, days):
            return self.prices[np.asarray(days, dtype=int)]

    assert best_day_policy(Oracle([3.0, 9.0, 5.0]), [0, 1, 2]) == 1
    assert best_day_policy(Oracle([4.0]), [0]) == 0
    prices = [3.0, 9.0, 5.0, 8.0, 1.0]
    env = TradingEnv(make_dataset(prices, np.ones(5)), record=True)
    trader = BestDayTrader(Oracle(prices))
    env.reset()
    trader.begin_episode(env)
    actions = []
    while not env.done:
        a = trader.act(None, env)
        actions.append(a)
        env.step(a)
    assert actions == [HOLD, SELL, HOLD, SELL, SELL]
    assert env.episode_total() == 2 * 9.0 + 2 * 8.0 + 1.0


def test_forecaster_fits_constant_series():
    days = np.arange(60.0)
    model = MoEForecaster(embedding="soliton", dim=8, n_experts=3, expert_hidden=8, embed_hidden=8,
                          epochs=50, random_state=0).fit(days[:, None], np.full(60, 12.5))
    np.testing.assert_allclose(model.predict(np.array([[70.0], [100.0]])), 12.5, atol=0.05)


def test_train_moe_reports_losses_and_is_seeded():
    rng = np.random.default_rng(7)
    recs = tuple(DayRecord(d, 10 + 3 * math.sin(d / 20) + rng.normal(0, 0.2), 1.0) for d in range(80))
    ds = Dataset(recs)
    kw = dict(embedding="table", dim=8, n_experts=3, expert_hidden=8, epochs=40)
    a = train_moe(ds, 0.25, seed=1, **kw)
    b = train_moe(ds, 0.25, seed=1, **kw)
    assert a.test_rmse == b.test_rmse and len(a.test_days) == 20
    assert a.train_mse >= 0 and len(a.model.loss_curve_) == 40
    c = train_moe(ds, 0.25, seed=1, split="chronological", **kw)
    assert c.test_days.tolist() == list(range(60, 80))


def test_forecaster_rejects_bad_configuration():
    X, y = np.arange(10.0)[:, None], np.ones(10)
    with pytest.raises(ConfigurationError):
        MoEForecaster(embedding="grid", epochs=1).fit(X, y)
    with pytest.raises(ConfigurationError):
        MoEForecaster(n_experts=2, top_k=3, epochs=1).fit(X, y)


@pytest.mark.parametrize("kind", ["table", "soliton"])
def test_forecaster_checkpoint_round_trip(kind, tmp_path):
    X, y = np.arange(30.0)[:, None], np.linspace(5, 9, 30)
    model = MoEForecaster(embedding=kind, dim=6, n_experts=3, expert_hidden=4, embed_hidden=4,
                          epochs=5).fit(X, y)
    save_forecaster(tmp_path / "m.spnn", model)
    back = load_forecaster(tmp_path / "m.spnn")
    probe = np.array([[0.0], [17.5], [365.0]])
    np.testing.assert_array_equal(back.predict(probe), model.predict(probe))
    assert back.get_params() == model.get_params()
