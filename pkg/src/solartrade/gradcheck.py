"""Finite-difference checks for every network used in the package."""

from __future__ import annotations

import numpy as np

from .agents import build_actor, build_critic, ppo_loss
from .forecast import MoENetwork, SolitonEmbedding, TableEmbedding
from .nn import Mlp, finite_diff_check, log_softmax

TOLERANCE = 1e-4
STEP = 1e-5


def _linear_readout(net, x, rng):
    """Loss = sum(c * net(x)) for a fixed random c; returns (loss_fn, analytic grads)."""
    out = net.forward(x)
    c = rng.standard_normal(out.shape)
    grads = net.backward(c)
    if isinstance(grads, tuple):  # Mlp.backward also returns the input gradient
        grads = grads[0]

    def loss():
        return float(np.sum(c * net.forward(x)))

    return loss, grads


def check_mlp(net: Mlp, x, rng) -> float:
    loss, grads = _linear_readout(net, x, rng)
    return finite_diff_check(loss, net.params, grads, STEP)


def check_ppo_policy(rng) -> float:
    """Clipped surrogate + entropy gradient on a frozen buffer with ratios away from the clip kinks."""
    actor = build_actor(rng, (8, 8, 8))
    actor.weights[-1] *= 100.0  # undo the near-zero output init so the check is informative
    critic = build_critic(rng, (8, 8))
    n = 12
    obs = rng.standard_normal((n, 4))
    actions = rng.integers(2, size=n)
    logp_now = log_softmax(actor.forward(obs))[np.arange(n), actions]
    # alternate ratios well inside and well outside the clip band
    offsets = np.where(np.arange(n) % 2 == 0, 0.05, 0.6) * np.sign(rng.standard_normal(n))
    old = logp_now - offsets
    adv = rng.standard_normal(n)
    ret = rng.standard_normal(n)
    _, _, grads, _ = ppo_loss(actor, critic, obs, actions, old, adv, ret, 0.2, 0.01)

    def loss():
        return ppo_loss(actor, critic, obs, actions, old, adv, ret, 0.2, 0.01)[0]

    return finite_diff_check(loss, actor.params, grads, STEP)


def check_value_loss(rng) -> float:
    actor = build_actor(rng, (8, 8, 8))
    critic = build_critic(rng, (8, 8))
    critic.weights[-1] += rng.standard_normal(critic.weights[-1].shape)
    obs = rng.standard_normal((10, 4))
    ret = rng.standard_normal(10)
    args = (actor, critic, obs, np.zeros(10, dtype=int), np.zeros(10), np.zeros(10), ret)
    grads = ppo_loss(*args)[3]
    return finite_diff_check(lambda: ppo_loss(*args)[1], critic.params, grads, STEP)


def check_soliton(rng, dim=128, hidden=64, **kw) -> float:
    emb = SolitonEmbedding.init(dim, hidden, rng, **kw)
    x = rng.uniform(0, 365, size=6)
    loss, grads = _linear_readout(emb, x, rng)
    return finite_diff_check(loss, emb.params, grads, STEP)


def check_table(rng, dim=128) -> float:
    emb = TableEmbedding.init(dim, rng)
    x = np.array([0, 17, 17, 200, 365])
    loss, grads = _linear_readout(emb, x, rng)
    return finite_diff_check(loss, emb.params, grads, STEP)


def check_moe(rng, kind="soliton", dim=8, experts=6, k=2, hidden=6) -> float:
    """End-to-end gradient through embedding, top-k gate and experts (small dims)."""
    emb = SolitonEmbedding.init(dim, hidden, rng) if kind == "soliton" else TableEmbedding.init(dim, rng)
    gate = Mlp.init([dim, experts], ["identity"], rng)
    gate.weights[0] *= 5.0  # separate the gate logits so perturbations never flip the top-k set
    net = MoENetwork(emb, gate, [Mlp.init([dim, hidden, 1], ["relu", "identity"], rng)
                                 for _ in range(experts)], k)
    x = rng.uniform(0, 365, size=5)
    target = rng.standard_normal(5)
    pred = net.forward(x)
    grads = net.backward(2.0 * (pred - target) / len(x))

    def loss():
        return float(np.mean((net.forward(x) - target) ** 2))

    return finite_diff_check(loss, net.params, grads, STEP)


def run_all(seed: int = 0) -> dict[str, float]:
    """Worst relative error per network, at the architectures used in training."""
    rng = np.random.default_rng(seed)
    x_obs = rng.standard_normal((5, 4))
    actor = build_actor(rng)
    actor.weights[-1] *= 100.0
    critic = build_critic(rng)
    critic.weights[-1] += rng.uniform(-0.3, 0.3, critic.weights[-1].shape)
    emb_in = rng.standard_normal((5, 128))
    return {
        "actor (4 layers)": check_mlp(actor, x_obs, rng),
        "critic (3 layers)": check_mlp(critic, x_obs, rng),
        "ppo policy loss": check_ppo_policy(rng),
        "ppo value loss": check_value_loss(rng),
        "gate": check_mlp(Mlp.init([128, 6], ["identity"], rng), emb_in, rng),
        "expert": check_mlp(Mlp.init([128, 64, 1], ["relu", "identity"], rng), emb_in, rng),
        "soliton embedding": check_soliton(rng),
        "table embedding": check_table(rng),
        "moe (soliton)": check_moe(rng, "soliton"),
        "moe (table)": check_moe(rng, "table"),
    }
