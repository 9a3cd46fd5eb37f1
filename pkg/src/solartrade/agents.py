"""PPO trader, rule-based baselines and the shared evaluation loop."""

from __future__ import annotations

import configparser
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Dataset
from .env import HOLD, OBS_DIM, SELL, ObservationScaler, TradingEnv
from .exceptions import ConfigurationError, ContractViolation
from .nn import AdamState, Mlp, adam_step, categorical_sample, load_mlp, log_softmax, save_mlp, softmax

log = logging.getLogger(__name__)

GAE_FORMS = ("standard", "truncated2")


# ----------------------------------------------------------- advantage math

def gae(rewards, values, dones, gamma: float, lam: float, form: str = "standard"):
    """Generalised advantage estimates and value targets.

    ``dones[t]`` marks that the episode ended after step t, in which case the
    bootstrap value for t+1 is zero. ``form="truncated2"`` keeps only the
    first two TD terms, ``delta_t + gamma*lam*delta_{t+1}``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=np.float64)
    if not (r.shape == v.shape == d.shape) or r.ndim != 1:
        raise ContractViolation(f"rewards {r.shape}, values {v.shape}, dones {d.shape} must be equal-length 1-D")
    if form not in GAE_FORMS:
        raise ConfigurationError(f"unknown GAE form {form!r}")
    live = 1.0 - d
    next_v = np.append(v[1:], 0.0)
    deltas = r + gamma * next_v * live - v
    if form == "truncated2":
        next_delta = np.append(deltas[1:], 0.0)
        adv = deltas + gamma * lam * live * next_delta
    else:
        adv = np.empty_like(deltas)
        acc = 0.0
        for t in range(len(deltas) - 1, -1, -1):
            acc = deltas[t] + gamma * lam * live[t] * acc
            adv[t] = acc
    return adv, adv + v


def normalize_advantages(adv) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    if adv.size < 2:
        return adv - adv.mean() if adv.size else adv
    std = adv.std()
    return (adv - adv.mean()) / std if std > 0 else adv - adv.mean()


def clipped_surrogate(ratio, advantage, clip: float) -> np.ndarray:
    """Per-sample ``min(ratio*A, clip(ratio, 1-eps, 1+eps)*A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantage)


# ------------------------------------------------------------------ rollouts

@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    episode_totals: list = field(default_factory=list)
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return len(self.actions)

    @classmethod
    def concat(cls, buffers) -> "RolloutBuffer":
        return cls(*(np.concatenate([getattr(b, name) for b in buffers])
                     for name in ("obs", "actions", "log_probs", "rewards", "values", "dones")),
                   episode_totals=[t for b in buffers for t in b.episode_totals])


def build_actor(rng, hidden=(64, 64, 64), activation="tanh") -> Mlp:
    sizes = [OBS_DIM, *hidden, 2]
    return Mlp.init(sizes, [activation] * len(hidden) + ["identity"], rng, output_scale=0.01)


def build_critic(rng, hidden=(64, 64), activation="tanh") -> Mlp:
    sizes = [OBS_DIM, *hidden, 1]
    return Mlp.init(sizes, [activation] * len(hidden) + ["identity"], rng, output_scale=0.0)


def actor_forward(actor: Mlp, obs) -> np.ndarray:
    return softmax(actor.forward(obs))


def critic_forward(critic: Mlp, obs):
    out = critic.forward(obs)
    return float(out[0]) if out.ndim == 1 else out[:, 0]


def collect_rollout(env: TradingEnv, actor: Mlp, critic: Mlp, rng: np.random.Generator,
                    greedy: bool = False) -> RolloutBuffer:
    """Run one full episode, recording log pi_old(a|s) at collection time."""
    obs = env.reset()
    rows_obs, actions, logps, rewards, values, dones = [], [], [], [], [], []
    done = False
    while not done:
        probs = actor_forward(actor, obs)
        if greedy:
            action = int(np.argmax(probs))  # ties go to HOLD
            logp = float(np.log(probs[action]))
        else:
            action, logp = categorical_sample(probs, rng)
        value = critic_forward(critic, obs)
        rows_obs.append(obs)
        next_obs, reward, done = env.step(action)
        actions.append(action)
        logps.append(logp)
        rewards.append(reward)
        values.append(value)
        dones.append(done)
        obs = next_obs
    return RolloutBuffer(np.array(rows_obs), np.array(actions, dtype=np.int64), np.array(logps),
                         np.array(rewards), np.array(values), np.array(dones, dtype=bool),
                         episode_totals=[env.episode_total()])


# ---------------------------------------------------------------- PPO loss

def ppo_loss(actor: Mlp, critic: Mlp, obs, actions, old_log_probs, advantages, returns,
             clip: float = 0.2, entropy_coef: float = 0.0, policy_mask=None):
    """Clipped-surrogate policy loss and value MSE, with exact gradients.

    Returns ``(policy_loss, value_loss, actor_grads, critic_grads)``.
    ``policy_mask`` restricts the policy term to a subset of samples; the
    value term always uses every sample. Samples whose probability ratio is
    non-finite are dropped from the policy term.
    """
    obs = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    n = len(actions)
    logits = actor.forward(obs)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    idx = np.arange(n)
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(logp_all[idx, actions] - old_log_probs)
    mask = np.ones(n, dtype=bool) if policy_mask is None else np.asarray(policy_mask, dtype=bool).copy()
    bad = ~np.isfinite(ratio)
    if np.any(bad & mask):
        log.warning("ppo_loss: excluded %d sample(s) with non-finite probability ratio", int(np.sum(bad & mask)))
    mask &= ~bad
    m = int(mask.sum())

    d_logits = np.zeros_like(logits)
    policy_loss = 0.0
    if m:
        r, a = ratio[mask], advantages[mask]
        unclipped = r * a
        clipped = np.clip(r, 1.0 - clip, 1.0 + clip) * a
        surrogate = np.minimum(unclipped, clipped)
        ent = -np.sum(probs[mask] * logp_all[mask], axis=1)
        policy_loss = -float(surrogate.mean()) - entropy_coef * float(ent.mean())
        # d surrogate / d log pi(a|s): only the unclipped branch carries gradient
        d_logp = np.where(unclipped <= clipped, unclipped, 0.0)
        onehot = np.zeros((m, logits.shape[1]))
        onehot[np.arange(m), actions[mask]] = 1.0
        d_surr = d_logp[:, None] * (onehot - probs[mask])
        d_ent = -probs[mask] * (logp_all[mask] + ent[:, None])
        d_logits[mask] = (-d_surr - entropy_coef * d_ent) / m
    actor_grads, _ = actor.backward(d_logits)

    values = critic.forward(obs)[:, 0]
    diff = values - np.asarray(returns, dtype=np.float64)
    value_loss = float(np.mean(diff * diff))
    critic_grads, _ = critic.backward((2.0 * diff / n)[:, None])
    return policy_loss, value_loss, actor_grads, critic_grads


# ------------------------------------------------------------------ policies

class SellOnlyPolicy:
    """Sell every day's generation on the day it arrives."""

    def act(self, obs, env=None, rng=None) -> int:
        return SELL


class RandomPolicy:
    """Uniform coin flip between HOLD and SELL."""

    def act(self, obs, env=None, rng=None) -> int:
        return int(rng.integers(2))


class GreedyPolicy:
    """Deterministic argmax wrapper around a fitted ``PPOTrader``."""

    def __init__(self, trader):
        self.trader = trader

    def act(self, obs, env=None, rng=None) -> int:
        return int(self.trader.predict(obs[None, :])[0])


@dataclass
class EvalResult:
    totals: list

    @property
    def mean(self) -> float:
        return float(np.mean(self.totals))


def episode_rng(seed: int, episode: int) -> np.random.Generator:
    return np.random.default_rng([seed, episode])


def run_episode(policy, env: TradingEnv, rng: np.random.Generator) -> float:
    obs = env.reset()
    if hasattr(policy, "begin_episode"):
        policy.begin_episode(env)
    done = False
    while not done:
        obs, _, done = env.step(policy.act(obs, env, rng))
    return env.episode_total()


def evaluate(policy, env: TradingEnv, episodes: int, seed: int = 0) -> EvalResult:
    """Run ``episodes`` independent episodes, each with its own RNG substream."""
    if episodes < 1:
        raise ConfigurationError("need at least one evaluation episode")
    return EvalResult([run_episode(policy, env, episode_rng(seed, ep)) for ep in range(episodes)])


# -------------------------------------------------------------- estimator

class PPOTrader(BaseEstimator):
    """PPO agent trained on a chronological dataset slice.

    ``fit`` takes a :class:`~solartrade.data.Dataset`; ``predict`` and
    ``predict_proba`` take scaled observation rows as emitted by
    :class:`~solartrade.env.TradingEnv`.

    Parameters
    ----------
    epochs : int
        Training epochs; one epoch collects ``rollouts_per_epoch`` full
        episodes and runs ``update_passes`` minibatch sweeps over them.
    reward_scale : float or "auto"
        Multiplier applied to environment rewards before GAE. ``"auto"``
        divides by one typical day's revenue times the squared episode
        length, which keeps the compounding recurrent rewards of order one.
    sell_transitions_only : bool
        Restrict the policy-gradient term to SELL transitions.
    """

    def __init__(self, epochs=1000, gamma=0.99, lam=0.95, clip=0.2, update_passes=4,
                 minibatch_size=32, lr_actor=3e-4, lr_critic=3e-4, entropy_coef=0.01,
                 actor_hidden=(64, 64, 64), critic_hidden=(64, 64), activation="tanh",
                 normalize_advantages=True, sell_transitions_only=False, gae_form="standard",
                 reward_balance_timing="post", reward_scale="auto", rollouts_per_epoch=1,
                 random_state=0):
        self.epochs = epochs
        self.gamma = gamma
        self.lam = lam
        self.clip = clip
        self.update_passes = update_passes
        self.minibatch_size = minibatch_size
        self.lr_actor = lr_actor
        self.lr_critic = lr_critic
        self.entropy_coef = entropy_coef
        self.actor_hidden = actor_hidden
        self.critic_hidden = critic_hidden
        self.activation = activation
        self.normalize_advantages = normalize_advantages
        self.sell_transitions_only = sell_transitions_only
        self.gae_form = gae_form
        self.reward_balance_timing = reward_balance_timing
        self.reward_scale = reward_scale
        self.rollouts_per_epoch = rollouts_per_epoch
        self.random_state = random_state

    def _validate_params(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigurationError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lam must lie in [0, 1], got {self.lam}")
        if self.clip <= 0:
            raise ConfigurationError("clip must be positive")
        if self.epochs < 0 or self.update_passes < 1 or self.minibatch_size < 1 or self.rollouts_per_epoch < 1:
            raise ConfigurationError("epochs >= 0, update_passes >= 1, minibatch_size >= 1 required")
        if self.entropy_coef < 0:
            raise ConfigurationError("entropy_coef must be >= 0")
        if self.gae_form not in GAE_FORMS:
            raise ConfigurationError(f"gae_form must be one of {GAE_FORMS}")

    def fit(self, X: Dataset, y=None, scaler: ObservationScaler | None = None):
        self._validate_params()
        if not isinstance(X, Dataset) or len(X) == 0:
            raise ConfigurationError("PPOTrader.fit expects a non-empty Dataset")
        rng = np.random.default_rng(self.random_state)
        env = TradingEnv(X, scaler, reward_balance_timing=self.reward_balance_timing)
        self.scaler_ = env.scaler
        self.actor_ = build_actor(rng, tuple(self.actor_hidden), self.activation)
        self.critic_ = build_critic(rng, tuple(self.critic_hidden), self.activation)
        if self.reward_scale == "auto":
            self.reward_scale_ = 1.0 / (self.scaler_.reward_unit_ * len(X) ** 2)
        else:
            self.reward_scale_ = float(self.reward_scale)
        actor_opt = AdamState.for_params(self.actor_.params, lr=self.lr_actor)
        critic_opt = AdamState.for_params(self.critic_.params, lr=self.lr_critic)
        self.training_curve_ = []
        self.loss_history_ = []
        for _ in range(self.epochs):
            buf = RolloutBuffer.concat([collect_rollout(env, self.actor_, self.critic_, rng)
                                        for _ in range(self.rollouts_per_epoch)])
            self.training_curve_.append(float(np.mean(buf.episode_totals)))
            self._update(buf, rng, actor_opt, critic_opt)
        return self

    def _update(self, buf: RolloutBuffer, rng, actor_opt, critic_opt):
        adv, ret = gae(buf.rewards * self.reward_scale_, buf.values, buf.dones,
                       self.gamma, self.lam, self.gae_form)
        if self.normalize_advantages:
            adv = normalize_advantages(adv)
        buf.advantages, buf.returns = adv, ret
        sells = buf.actions == SELL
        p_losses, v_losses = [], []
        for _ in range(self.update_passes):
            order = rng.permutation(len(buf))
            for start in range(0, len(order), self.minibatch_size):
                mb = order[start:start + self.minibatch_size]
                mask = sells[mb] if self.sell_transitions_only else None
                pl, vl, ga, gc = ppo_loss(self.actor_, self.critic_, buf.obs[mb], buf.actions[mb],
                                          buf.log_probs[mb], adv[mb], ret[mb], self.clip,
                                          self.entropy_coef, mask)
                adam_step(self.actor_.params, ga, actor_opt)
                adam_step(self.critic_.params, gc, critic_opt)
                p_losses.append(pl)
                v_losses.append(vl)
        self.loss_history_.append((float(np.mean(p_losses)), float(np.mean(v_losses))))

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "actor_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != OBS_DIM:
            raise ConfigurationError(f"observations must have {OBS_DIM} columns")
        return softmax(self.actor_.forward(X))

    def predict(self, X) -> np.ndarray:
        """Greedy actions; exact ties resolve to HOLD."""
        return np.argmax(self.predict_proba(X), axis=1)

    def value(self, X) -> np.ndarray:
        check_is_fitted(self, "critic_")
        return critic_forward(self.critic_, check_array(X, dtype=np.float64))

    def act(self, obs, env=None, rng=None) -> int:
        probs = softmax(self.actor_.forward(obs))
        return categorical_sample(probs, rng)[0]

    def make_env(self, dataset: Dataset, record: bool = False) -> TradingEnv:
        """Environment over ``dataset`` sharing this agent's observation scaling."""
        check_is_fitted(self, "scaler_")
        return TradingEnv(dataset, self.scaler_, self.reward_balance_timing, record)


# -------------------------------------------------------------- checkpoints

_SCALER_KEYS = ("price_mean_", "price_std_", "gen_mean_", "gen_std_", "storage_unit_", "reward_unit_")


def save_trader(directory, trader: PPOTrader) -> None:
    """Write ``actor.spnn``, ``critic.spnn`` and a ``trader.cfg`` sidecar."""
    check_is_fitted(trader, "actor_")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_mlp(directory / "actor.spnn", trader.actor_)
    save_mlp(directory / "critic.spnn", trader.critic_)
    lines = ["[params]"]
    for key, value in sorted(trader.get_params().items()):
        lines.append(f"{key} = {json.dumps(value)}")
    lines += ["", "[scaler]"]
    lines += [f"{key} = {getattr(trader.scaler_, key)!r}" for key in _SCALER_KEYS]
    lines += [f"reward_scale_ = {trader.reward_scale_!r}", ""]
    (directory / "trader.cfg").write_text("\n".join(lines), encoding="utf-8")


def load_trader(directory) -> PPOTrader:
    directory = Path(directory)
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if not parser.read(directory / "trader.cfg", encoding="utf-8"):
        raise ConfigurationError(f"no trader.cfg in {directory}")
    params = {k: json.loads(v) for k, v in parser.items("params")}
    for key in ("actor_hidden", "critic_hidden"):
        params[key] = tuple(params[key])
    trader = PPOTrader(**params)
    scaler = ObservationScaler()
    for key in _SCALER_KEYS:
        setattr(scaler, key, float(parser.get("scaler", key)))
    trader.scaler_ = scaler
    trader.reward_scale_ = float(parser.get("scaler", "reward_scale_"))
    trader.actor_ = load_mlp(directory / "actor.spnn")
    trader.critic_ = load_mlp(directory / "critic.spnn")
    return trader
