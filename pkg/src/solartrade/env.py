"""Episodic hold/sell trading environment over a daily dataset.

One step per day. Today's generation goes into storage first, then the
action resolves: SELL liquidates all storage at today's price, HOLD keeps
it. On the last day any remaining storage is sold regardless of the action.
Rewards are sparse (zero on holds) and recurrent: a sale's reward builds on
the previous sale's reward.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import Dataset
from .exceptions import ConfigurationError, ContractViolation, ValidationError

HOLD, SELL = 0, 1
OBS_DIM = 4
TRAJECTORY_HEADER = ("step", "price", "generation", "action", "stored", "balance", "reward")


def wattage(vmp, imp):
    """Panel power at the maximum-power point."""
    vmp = np.asarray(vmp, dtype=np.float64)
    imp = np.asarray(imp, dtype=np.float64)
    if np.any(vmp < 0) or np.any(imp < 0):
        raise ValidationError("vmp and imp must be non-negative")
    out = vmp * imp
    return float(out) if out.ndim == 0 else out


def compute_reward(prev_reward: float, generated_today: float, balance: float) -> float:
    return max(0.0, prev_reward - generated_today + balance)


class ObservationScaler(TransformerMixin, BaseEstimator):
    """Maps raw ``[price, stored, generation, prev_reward]`` rows to network inputs.

    Price and generation are standardised with train-split statistics.
    Storage and reward are unbounded and grow over an episode, so they are
    log-compressed in units of one typical day (mean generation, and mean
    generation times mean price).
    """

    def fit(self, X, y=None):
        if isinstance(X, Dataset):
            X = np.column_stack([X.prices, X.generation])
        X = check_array(X, dtype=np.float64)
        if X.shape[1] < 2:
            raise ConfigurationError("expected at least [price, generation] columns")
        # [price, generation] pairs or full raw observation rows
        price = X[:, 0]
        gen = X[:, 1] if X.shape[1] == 2 else X[:, 2]
        self.price_mean_ = float(price.mean())
        self.price_std_ = float(price.std()) or 1.0
        self.gen_mean_ = float(gen.mean())
        self.gen_std_ = float(gen.std()) or 1.0
        self.storage_unit_ = self.gen_mean_ if self.gen_mean_ > 0 else 1.0
        self.reward_unit_ = self.storage_unit_ * (self.price_mean_ if self.price_mean_ > 0 else 1.0)
        return self

    def transform(self, X):
        check_is_fitted(self, "price_mean_")
        X = check_array(X, dtype=np.float64, ensure_2d=False)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != OBS_DIM:
            raise ConfigurationError(f"expected {OBS_DIM} raw observation columns, got {X.shape[1]}")
        out = np.column_stack([self.scale_row(*row) for row in X]).T
        return out[0] if single else out

    def scale_row(self, price, stored, generation, prev_reward) -> np.ndarray:
        """Unvalidated single-row transform used inside the environment loop."""
        return np.array([(price - self.price_mean_) / self.price_std_,
                         math.log1p(stored / self.storage_unit_),
                         (generation - self.gen_mean_) / self.gen_std_,
                         math.log1p(prev_reward / self.reward_unit_)])


class TradingEnv:
    """Deterministic trading environment over one contiguous dataset slice."""

    def __init__(self, dataset: Dataset, scaler: ObservationScaler | None = None,
                 reward_balance_timing: str = "post", record: bool = False):
        if len(dataset) == 0:
            raise ConfigurationError("environment needs a non-empty dataset slice")
        if reward_balance_timing not in ("pre", "post"):
            raise ConfigurationError(f"reward_balance_timing must be 'pre' or 'post', got {reward_balance_timing!r}")
        self.dataset = dataset
        self.prices = dataset.prices
        self.generation = dataset.generation
        self.scaler = scaler if scaler is not None else ObservationScaler().fit(dataset)
        self.reward_balance_timing = reward_balance_timing
        self.record = record
        self.trajectory: list[tuple] = []
        self.reset()

    def __len__(self):
        return len(self.prices)

    @property
    def n_days(self) -> int:
        return len(self.prices)

    @property
    def last_day(self) -> int:
        return len(self.prices) - 1

    def raw_observation(self) -> np.ndarray:
        c = min(self.cursor, self.last_day)
        return np.array([self.prices[c], self.stored, self.generation[c], self.prev_reward])

    def observation(self) -> np.ndarray:
        c = min(self.cursor, self.last_day)
        return self.scaler.scale_row(self.prices[c], self.stored, self.generation[c], self.prev_reward)

    def reset(self) -> np.ndarray:
        self.cursor = 0
        self.stored = 0.0
        self.balance = 0.0
        self.prev_reward = 0.0
        self.done = False
        self.sold_total = 0.0
        self.generated_total = 0.0
        self.trajectory = []
        return self.observation()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise ContractViolation("step() called on a finished episode; call reset()")
        if action not in (HOLD, SELL):
            raise ConfigurationError(f"action must be HOLD(0) or SELL(1), got {action!r}")
        c = self.cursor
        gen, price = self.generation[c], self.prices[c]
        self.stored += gen
        self.generated_total += gen

        forced = c == self.last_day and self.stored > 0.0
        sold = action == SELL or forced
        reward = 0.0
        if sold:
            balance_before = self.balance
            self.balance += self.stored * price
            self.sold_total += self.stored
            self.stored = 0.0
            balance_term = self.balance if self.reward_balance_timing == "post" else balance_before
            reward = compute_reward(self.prev_reward, gen, balance_term)
        if reward > 0.0:
            self.prev_reward = reward

        if self.record:
            self.trajectory.append((c, price, gen, SELL if sold else HOLD, self.stored, self.balance, reward))
        self.cursor += 1
        self.done = self.cursor > self.last_day
        return self.observation(), reward, self.done

    def episode_total(self) -> float:
        if not self.done:
            raise ContractViolation("episode_total() requires a finished episode")
        return self.balance

    def write_trajectory(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRAJECTORY_HEADER)
            for row in self.trajectory:
                writer.writerow([row[0], repr(float(row[1])), repr(float(row[2])), row[3],
                                 repr(float(row[4])), repr(float(row[5])), repr(float(row[6]))])


def exhaustive_optimum(prices, generation) -> tuple[float, np.ndarray]:
    """Best achievable total over all 2^n action sequences (n <= 20).

    Returns the optimum and one maximising action sequence. The final day
    is always a sale because of forced liquidation.
    """
    prices = np.asarray(prices, dtype=np.float64)
    generation = np.asarray(generation, dtype=np.float64)
    n = len(prices)
    if n == 0 or n > 20:
        raise ConfigurationError("exhaustive enumeration supports 1..20 days")
    codes = np.arange(2 ** n, dtype=np.int64)
    actions = (codes[:, None] >> np.arange(n)) & 1
    stored = np.zeros(len(codes))
    total = np.zeros(len(codes))
    for t in range(n):
        stored += generation[t]
        sell = actions[:, t].astype(bool) | (t == n - 1)
        total = np.where(sell, total + stored * prices[t], total)
        stored = np.where(sell, 0.0, stored)
    best = int(np.argmax(total))
    return float(total[best]), actions[best].copy()
