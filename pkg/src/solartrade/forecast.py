"""Day-of-year price forecaster: table or soliton embedding feeding a sparse top-k MoE.

The soliton embedding maps a scalar day to ``d`` features

    z = tanh(phase_net(x)),  A = amp_net(x)
    out = A * sec(z)**2 + sin(z / cos(z))

where both nets are small MLPs on the scaled input ``x / 366``. Because
``|z| < 1 < pi/2`` the secant never blows up.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, DayRecord, split_chronological, split_random
from .env import HOLD, SELL
from .exceptions import ConfigurationError, TrainingDivergence, ValidationError
from .nn import AdamState, Mlp, adam_step, mse_loss, read_mlp, softmax, write_mlp

log = logging.getLogger(__name__)

VOCAB = 366
SOLITON_TAILS = ("sin_of_ratio", "tan")
SOLITON_PROFILES = ("sec", "sech")


def augment_long(day, rng: np.random.Generator):
    """``day + u`` with ``u ~ U[0, 0.99)``; works elementwise on arrays."""
    day = np.asarray(day, dtype=np.float64)
    if np.any(day < 0):
        raise ValidationError("day must be non-negative")
    out = day + rng.uniform(0.0, 0.99, size=day.shape)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------- embeddings

class SolitonEmbedding:
    def __init__(self, amp_net: Mlp, phase_net: Mlp, input_scale: float = 366.0,
                 tail: str = "sin_of_ratio", profile: str = "sec"):
        if tail not in SOLITON_TAILS:
            raise ConfigurationError(f"soliton tail must be one of {SOLITON_TAILS}")
        if profile not in SOLITON_PROFILES:
            raise ConfigurationError(f"soliton profile must be one of {SOLITON_PROFILES}")
        if amp_net.n_out != phase_net.n_out or amp_net.n_in != 1 or phase_net.n_in != 1:
            raise ConfigurationError("amplitude and phase nets must map 1 -> d")
        if phase_net.activations[-1] != "tanh":
            raise ConfigurationError("phase net must end in tanh")
        self.amp_net = amp_net
        self.phase_net = phase_net
        self.input_scale = input_scale
        self.tail = tail
        self.profile = profile
        self._cache = None

    kind = "soliton"

    @classmethod
    def init(cls, dim: int, hidden: int, rng, **kw) -> "SolitonEmbedding":
        amp = Mlp.init([1, hidden, dim], ["tanh", "identity"], rng)
        phase = Mlp.init([1, hidden, dim], ["tanh", "tanh"], rng)
        return cls(amp, phase, **kw)

    @property
    def dim(self) -> int:
        return self.amp_net.n_out

    @property
    def params(self):
        return self.amp_net.params + self.phase_net.params

    def nets(self):
        return [self.amp_net, self.phase_net]

    def forward(self, x) -> np.ndarray:
        s = np.asarray(x, dtype=np.float64).reshape(-1, 1) / self.input_scale
        amp = self.amp_net.forward(s)
        z = self.phase_net.forward(s)
        cos = np.cos(z)
        if self.profile == "sec":
            shape = 1.0 / (cos * cos)
            d_shape = 2.0 * shape * np.tan(z)
        else:
            shape = 1.0 / np.cosh(z) ** 2
            d_shape = -2.0 * shape * np.tanh(z)
        if self.tail == "sin_of_ratio":
            ratio = z / cos
            tail = np.sin(ratio)
            d_tail = np.cos(ratio) * (cos + z * np.sin(z)) / (cos * cos)
        else:
            tail = np.tan(z)
            d_tail = 1.0 / (cos * cos)
        self._cache = (amp, shape, d_shape, d_tail)
        return amp * shape + tail

    def backward(self, grad_out):
        amp, shape, d_shape, d_tail = self._cache
        g_amp, _ = self.amp_net.backward(grad_out * shape)
        g_phase, _ = self.phase_net.backward(grad_out * (amp * d_shape + d_tail))
        return g_amp + g_phase


def soliton_embed(x, embedding: SolitonEmbedding) -> np.ndarray:
    out = embedding.forward(np.atleast_1d(x))
    return out[0] if np.ndim(x) == 0 else out


class TableEmbedding:
    kind = "table"

    def __init__(self, table: np.ndarray):
        table = np.asarray(table, dtype=np.float64)
        if table.ndim != 2 or table.shape[0] != VOCAB:
            raise ConfigurationError(f"embedding table must have {VOCAB} rows")
        self.table = table
        self._rows = None

    @classmethod
    def init(cls, dim: int, rng, **_) -> "TableEmbedding":
        return cls(rng.standard_normal((VOCAB, dim)))

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    @property
    def params(self):
        return [self.table]

    def forward(self, x) -> np.ndarray:
        days = np.floor(np.asarray(x, dtype=np.float64)).astype(np.int64).reshape(-1)
        if np.any(days < 0) or np.any(days >= VOCAB):
            raise ValidationError(f"day index outside 0..{VOCAB - 1}")
        self._rows = days
        return self.table[days]

    def backward(self, grad_out):
        grad = np.zeros_like(self.table)
        np.add.at(grad, self._rows, grad_out)
        return [grad]


def table_embed(day: int, embedding: TableEmbedding) -> np.ndarray:
    return embedding.forward([day])[0]


# ------------------------------------------------------------------- gating

def gate_topk(logits, k: int) -> np.ndarray:
    """Softmax over the ``k`` largest logits per row; all other weights are exactly 0.

    Ties are broken toward the lower expert index.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    n, n_experts = logits.shape
    if not 1 <= k <= n_experts:
        raise ConfigurationError(f"top_k must lie in 1..{n_experts}, got {k}")
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    rows = np.arange(n)[:, None]
    weights = np.zeros_like(logits)
    weights[rows, top] = softmax(logits[rows, top])
    return weights


class MoENetwork:
    """Embedding -> top-k gate over experts -> weighted sum of expert outputs."""

    def __init__(self, embedding, gate: Mlp, experts: list, k: int):
        if not 1 <= k <= len(experts):
            raise ConfigurationError(f"top_k must lie in 1..{len(experts)}")
        if gate.n_in != embedding.dim or gate.n_out != len(experts):
            raise ConfigurationError("gate must map embedding dim -> number of experts")
        self.embedding = embedding
        self.gate = gate
        self.experts = experts
        self.k = k
        self._cache = None

    @property
    def params(self):
        out = list(self.embedding.params) + self.gate.params
        for e in self.experts:
            out += e.params
        return out

    def expert_param_slices(self) -> list[slice]:
        """Positions of each expert's arrays inside ``params``."""
        start = len(self.embedding.params) + len(self.gate.params)
        out = []
        for e in self.experts:
            out.append(slice(start, start + len(e.params)))
            start += len(e.params)
        return out

    def forward(self, x) -> np.ndarray:
        emb = self.embedding.forward(x)
        weights = gate_topk(self.gate.forward(emb), self.k)
        outs = np.column_stack([e.forward(emb)[:, 0] for e in self.experts])
        self._cache = (weights, outs)
        return np.sum(weights * outs, axis=1)

    def gate_weights(self, x) -> np.ndarray:
        return gate_topk(self.gate.forward(self.embedding.forward(x)), self.k)

    def backward(self, grad_pred, grad_weights=None):
        weights, outs = self._cache
        g = np.asarray(grad_pred, dtype=np.float64)[:, None]
        d_w = g * outs
        if grad_weights is not None:
            d_w = d_w + grad_weights
        # softmax Jacobian restricted to the selected experts; unselected weights are 0
        d_logits = weights * (d_w - np.sum(weights * d_w, axis=1, keepdims=True))
        gate_grads, d_emb = self.gate.backward(d_logits)
        expert_grads = []
        for j, e in enumerate(self.experts):
            eg, d_in = e.backward(g * weights[:, j:j + 1])
            expert_grads += eg
            d_emb = d_emb + d_in
        return list(self.embedding.backward(d_emb)) + gate_grads + expert_grads


def moe_forward(model: MoENetwork, x) -> np.ndarray:
    return model.forward(x)


def importance_penalty(weights) -> tuple[float, np.ndarray]:
    """Squared coefficient of variation of per-expert importance and its gradient w.r.t. weights."""
    imp = weights.sum(axis=0)
    n_experts = imp.size
    mean = imp.mean()
    if mean <= 0:
        return 0.0, np.zeros_like(weights)
    var = np.mean((imp - mean) ** 2)
    cv2 = var / mean ** 2
    d_imp = 2.0 * (imp - mean) / (n_experts * mean ** 2) - 2.0 * var / (n_experts * mean ** 3)
    return float(cv2), np.broadcast_to(d_imp, weights.shape).copy()


# --------------------------------------------------------------- estimator

def _as_days(X) -> np.ndarray:
    X = check_array(X, dtype=np.float64, ensure_2d=False)
    if X.ndim == 2:
        if X.shape[1] != 1:
            raise ConfigurationError("forecaster input must be a single day-of-year column")
        X = X[:, 0]
    return X


class MoEForecaster(RegressorMixin, BaseEstimator):
    """Sparse mixture-of-experts regressor from day-of-year to price.

    ``X`` is a single column of day indices (0..365); ``y`` is the price.
    Targets are standardised internally; reported losses are in price units.
    With ``embedding="soliton"`` and ``augment=True`` each epoch adds a fresh
    ``U[0, 0.99)`` offset to every training day.
    """

    def __init__(self, embedding="soliton", dim=128, n_experts=6, top_k=2, expert_hidden=64,
                 embed_hidden=64, lr=1e-3, epochs=2000, batch_size=None, augment=True,
                 input_scale=366.0, soliton_tail="sin_of_ratio", soliton_profile="sec",
                 importance_coef=0.0, random_state=0):
        self.embedding = embedding
        self.dim = dim
        self.n_experts = n_experts
        self.top_k = top_k
        self.expert_hidden = expert_hidden
        self.embed_hidden = embed_hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.augment = augment
        self.input_scale = input_scale
        self.soliton_tail = soliton_tail
        self.soliton_profile = soliton_profile
        self.importance_coef = importance_coef
        self.random_state = random_state

    def _build(self, rng) -> MoENetwork:
        if self.embedding == "soliton":
            emb = SolitonEmbedding.init(self.dim, self.embed_hidden, rng, input_scale=self.input_scale,
                                        tail=self.soliton_tail, profile=self.soliton_profile)
        elif self.embedding == "table":
            emb = TableEmbedding.init(self.dim, rng)
        else:
            raise ConfigurationError(f"embedding must be 'soliton' or 'table', got {self.embedding!r}")
        gate = Mlp.init([self.dim, self.n_experts], ["identity"], rng)
        experts = [Mlp.init([self.dim, self.expert_hidden, 1], ["relu", "identity"], rng)
                   for _ in range(self.n_experts)]
        return MoENetwork(emb, gate, experts, self.top_k)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, ensure_2d=False, y_numeric=True)
        days = _as_days(X)
        if np.any(days < 0):
            raise ValidationError("day indices must be non-negative")
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigurationError(f"top_k must lie in 1..{self.n_experts}")
        rng = np.random.default_rng(self.random_state)
        self.network_ = self._build(rng)
        self.y_mean_ = float(y.mean())
        self.y_std_ = float(y.std()) or 1.0
        target = (y - self.y_mean_) / self.y_std_
        opt = AdamState.for_params(self.network_.params, lr=self.lr)
        augment = self.augment and self.embedding == "soliton"
        batch = len(days) if not self.batch_size else int(self.batch_size)
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            order = rng.permutation(len(days)) if batch < len(days) else np.arange(len(days))
            inputs = augment_long(days, rng) if augment else days
            losses = []
            for start in range(0, len(order), batch):
                mb = order[start:start + batch]
                pred = self.network_.forward(inputs[mb])
                loss, grad = mse_loss(pred, target[mb])
                grad_w = None
                if self.importance_coef > 0:
                    cv2, d_w = importance_penalty(self.network_._cache[0])
                    grad_w = self.importance_coef * d_w
                if not np.isfinite(loss):
                    raise TrainingDivergence(f"non-finite training loss at epoch {epoch}")
                adam_step(self.network_.params, self.network_.backward(grad, grad_w), opt)
                losses.append(loss * len(mb))
            self.loss_curve_.append(float(np.sum(losses) / len(days)) * self.y_std_ ** 2)
        self.train_mse_augmented_ = self.loss_curve_[-1] if self.loss_curve_ else float("nan")
        self.train_mse_ = float(np.mean((self.predict(days) - y) ** 2))
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return self.network_.forward(_as_days(X)) * self.y_std_ + self.y_mean_

    def gate_weights(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        return self.network_.gate_weights(_as_days(X))


@dataclass
class ForecastResult:
    model: MoEForecaster
    train_mse: float
    train_mse_augmented: float
    test_rmse: float
    split: str
    test_days: np.ndarray
    test_actual: np.ndarray
    test_predicted: np.ndarray


def _records_xy(records):
    return (np.array([r.day for r in records], dtype=np.float64),
            np.array([r.price for r in records], dtype=np.float64))


def train_moe(dataset: Dataset, test_fraction: float = 0.3, seed: int = 0, split: str = "random",
              **model_params) -> ForecastResult:
    """Fit a forecaster on its own split and report train MSE / test RMSE.

    ``split="random"`` reproduces the original protocol, whose test days can
    overlap the trading environment's evaluation window; ``"chronological"``
    holds out the final days instead and has no such leak.
    """
    if split == "random":
        train, test = split_random(dataset, test_fraction, seed)
    elif split == "chronological":
        a, b = split_chronological(dataset, test_fraction)
        train, test = list(a.records), list(b.records)
    else:
        raise ConfigurationError(f"split must be 'random' or 'chronological', got {split!r}")
    if not train or not test:
        raise ValidationError("forecaster split produced an empty side")
    x_tr, y_tr = _records_xy(train)
    x_te, y_te = _records_xy(test)
    model = MoEForecaster(random_state=seed, **model_params).fit(x_tr, y_tr)
    pred = model.predict(x_te)
    rmse = float(np.sqrt(np.mean((pred - y_te) ** 2)))
    return ForecastResult(model, model.train_mse_, model.train_mse_augmented_, rmse, split,
                          x_te.astype(np.int64), y_te, pred)


# ------------------------------------------------------------ trading rule

def best_day_policy(model, window_days) -> int:
    """Offset into ``window_days`` of the highest forecast price (earliest on ties)."""
    window_days = np.asarray(window_days)
    if window_days.size == 0:
        raise ValidationError("forecast window is empty")
    return int(np.argmax(model.predict(window_days.astype(np.float64))))


class BestDayTrader:
    """Hold until the forecast peak of the remaining episode, sell, then re-plan."""

    def __init__(self, model):
        self.model = model
        self._target = None

    def begin_episode(self, env):
        self._target = None

    def act(self, obs, env, rng=None) -> int:
        c = env.cursor
        if self._target is None or self._target < c:
            days = env.dataset.days[c:] % VOCAB
            self._target = c + best_day_policy(self.model, days)
        if c == self._target:
            self._target = None
            return SELL
        return HOLD


# -------------------------------------------------------------- checkpoints

_KIND_TAGS = {"table": 0, "soliton": 1}


def save_forecaster(path, model: MoEForecaster) -> None:
    """One file: kind tag byte, JSON metadata, then every network in SPNN format.

    A table embedding is stored as a single identity layer whose ``[d, 366]``
    weight matrix is the transposed lookup table.
    """
    check_is_fitted(model, "network_")
    net = model.network_
    emb = net.embedding
    meta = {"params": model.get_params(), "y_mean": model.y_mean_, "y_std": model.y_std_}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    if emb.kind == "table":
        nets = [Mlp([emb.table.T.copy()], [np.zeros(emb.dim)], ["identity"])]
    else:
        nets = emb.nets()
    nets = nets + [net.gate] + list(net.experts)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<B", _KIND_TAGS[emb.kind]))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(nets)))
        for m in nets:
            write_mlp(fh, m)


def load_forecaster(path) -> MoEForecaster:
    with open(path, "rb") as fh:
        (tag,) = struct.unpack("<B", fh.read(1))
        (n_meta,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(n_meta).decode("utf-8"))
        (n_nets,) = struct.unpack("<I", fh.read(4))
        nets = [read_mlp(fh) for _ in range(n_nets)]
    kinds = {v: k for k, v in _KIND_TAGS.items()}
    if tag not in kinds:
        raise ValidationError(f"unknown embedding tag {tag}")
    model = MoEForecaster(**meta["params"])
    if kinds[tag] == "table":
        emb = TableEmbedding(nets[0].weights[0].T.copy())
        rest = nets[1:]
    else:
        emb = SolitonEmbedding(nets[0], nets[1], model.input_scale, model.soliton_tail, model.soliton_profile)
        rest = nets[2:]
    model.network_ = MoENetwork(emb, rest[0], rest[1:], model.top_k)
    model.y_mean_, model.y_std_ = meta["y_mean"], meta["y_std"]
    return model
