"""Small numpy MLP engine with exact reverse-mode gradients.

Everything runs in float64. A network is a fixed stack of dense layers, so
the backward pass replays a cached tape of (input, pre-activation) pairs
instead of building a general autodiff graph.

Gradients are plain lists of arrays aligned with ``Mlp.params`` (weight of
layer 0, bias of layer 0, weight of layer 1, ...).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .exceptions import ConfigurationError, ContractViolation, ValidationError

log = logging.getLogger(__name__)

Grads = list  # list[np.ndarray], shapes mirror Mlp.params

ACTIVATIONS = ("tanh", "relu", "identity")
_ACT_CODES = {name: code for code, name in enumerate(ACTIVATIONS)}

MAGIC = b"SPNN"
FORMAT_VERSION = 1


def _activate(z, kind):
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    return z


def _activation_grad(z, a, kind):
    if kind == "tanh":
        return 1.0 - a * a
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    return np.ones_like(z)


class Mlp:
    """Dense feed-forward network.

    Weights are stored as ``[out, in]`` matrices. ``forward`` accepts either a
    single vector or a batch of row vectors and caches what ``backward`` needs.
    """

    def __init__(self, weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 activations: Sequence[str]):
        if not (len(weights) == len(biases) == len(activations)) or not weights:
            raise ConfigurationError("weights, biases and activations must be non-empty and equal length")
        for i, (w, b, act) in enumerate(zip(weights, biases, activations)):
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ConfigurationError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i and w.shape[1] != weights[i - 1].shape[0]:
                raise ConfigurationError(
                    f"layer {i} expects {w.shape[1]} inputs, previous layer emits {weights[i - 1].shape[0]}")
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.activations = list(activations)
        self._tape = None

    @classmethod
    def init(cls, sizes: Sequence[int], activations: Sequence[str] | str,
             rng: np.random.Generator, output_scale: float = 1.0) -> "Mlp":
        """Fan-balanced uniform initialisation, U(-sqrt(6/(in+out)), +sqrt(6/(in+out))).

        ``output_scale`` multiplies the final weight matrix (0 zeroes it).
        """
        n_layers = len(sizes) - 1
        if n_layers < 1:
            raise ConfigurationError("need at least an input and an output size")
        if isinstance(activations, str):
            activations = [activations] * n_layers
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
            biases.append(np.zeros(fan_out))
        weights[-1] *= output_scale
        return cls(weights, biases, activations)

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.n_in] + [w.shape[0] for w in self.weights]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activations)

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.ndim != 2 or h.shape[1] != self.n_in:
            raise ConfigurationError(f"input has shape {x.shape}, network expects {self.n_in} features")
        tape = []
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = h @ w.T + b
            a = _activate(z, act)
            tape.append((h, z, a))
            h = a
        self._tape = (tape, single)
        return h[0] if single else h

    __call__ = forward

    def backward(self, grad_out) -> tuple[Grads, np.ndarray]:
        """Backpropagate ``dLoss/dOutput`` through the cached forward pass.

        Returns the parameter gradients and ``dLoss/dInput``.
        """
        if self._tape is None:
            raise ContractViolation("backward() called without a cached forward pass")
        tape, single = self._tape
        g = np.asarray(grad_out, dtype=np.float64)
        if single:
            g = g[None, :]
        if g.shape != tape[-1][2].shape:
            raise ConfigurationError(f"upstream gradient {g.shape} does not match output {tape[-1][2].shape}")
        grads = [None] * (2 * len(self.weights))
        for i in reversed(range(len(self.weights))):
            h, z, a = tape[i]
            dz = g * _activation_grad(z, a, self.activations[i])
            grads[2 * i] = dz.T @ h
            grads[2 * i + 1] = dz.sum(axis=0)
            g = dz @ self.weights[i]
        return grads, (g[0] if single else g)


def mlp_forward(params: Mlp, x) -> np.ndarray:
    return params.forward(x)


def backward(params: Mlp, grad_out) -> tuple[Grads, np.ndarray]:
    return params.backward(grad_out)


# --------------------------------------------------------------------- Adam

@dataclass
class AdamState:
    """First/second moment accumulators for a list of parameter arrays."""

    m: list
    v: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> bool:
    """Apply one bias-corrected Adam update in place.

    Returns False (and leaves everything untouched) when any gradient entry
    is non-finite.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ConfigurationError("params, grads and optimizer state are misaligned")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ConfigurationError(f"shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        log.warning("non-finite gradient at Adam step %d; update skipped", state.step + 1)
        return False
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


# --------------------------------------------------- probability utilities

def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def categorical_sample(probs, rng: np.random.Generator) -> tuple[int, float]:
    """Draw one index from ``probs``; returns ``(index, log(probs[index]))``."""
    p = np.asarray(probs, dtype=np.float64)
    total = p.sum()
    if p.ndim != 1 or not np.all(p >= 0.0) or total <= 0.0:
        raise ContractViolation(f"invalid probability vector {p}")
    if abs(total - 1.0) > 1e-6:
        raise ContractViolation(f"probabilities sum to {total}, expected 1")
    u = rng.random() * total
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    idx = min(idx, len(p) - 1)
    while p[idx] == 0.0:  # guards against cumsum round-off landing on an empty bin
        idx -= 1
    return idx, float(np.log(p[idx]))


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigurationError(f"pred {pred.shape} and target {target.shape} differ")
    diff = pred - target
    n = diff.size
    return float(np.mean(diff * diff)), 2.0 * diff / n


# ------------------------------------------------------- gradient checking

def finite_diff_check(loss_fn: Callable[[], float], params: Sequence[np.ndarray],
                      analytic: Sequence[np.ndarray], step: float = 1e-5,
                      rel_floor: float = 1e-5) -> float:
    """Worst relative error between ``analytic`` and central differences.

    ``loss_fn`` must read the arrays in ``params`` (they are perturbed in
    place and restored). The error for entry i is
    ``|analytic_i - numeric_i| / max(|numeric_i|, rel_floor * max(1, max|numeric|))``,
    so a gradient off by a factor of two scores 1.0.
    """
    numeric = []
    for p in params:
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * step)
        numeric.append(num)
    scale = max([1.0] + [float(np.max(np.abs(n))) for n in numeric if n.size])
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(n), rel_floor * scale)
        worst = max(worst, float(np.max(np.abs(np.asarray(a) - n) / denom)))
    return worst


# ------------------------------------------------------------ checkpoints

def write_mlp(fh, net: Mlp) -> None:
    fh.write(struct.pack("<4sII", MAGIC, FORMAT_VERSION, len(net.weights)))
    for w, b, act in zip(net.weights, net.biases, net.activations):
        fh.write(struct.pack("<III", w.shape[0], w.shape[1], _ACT_CODES[act]))
        fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def _read_exact(fh, n):
    buf = fh.read(n)
    if len(buf) != n:
        raise ValidationError("truncated network checkpoint")
    return buf


def read_mlp(fh) -> Mlp:
    magic, version, n_layers = struct.unpack("<4sII", _read_exact(fh, 12))
    if magic != MAGIC:
        raise ValidationError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    weights, biases, acts = [], [], []
    for _ in range(n_layers):
        out_dim, in_dim, code = struct.unpack("<III", _read_exact(fh, 12))
        if code >= len(ACTIVATIONS):
            raise ValidationError(f"unknown activation code {code}")
        w = np.frombuffer(_read_exact(fh, 8 * out_dim * in_dim), dtype="<f8").reshape(out_dim, in_dim)
        b = np.frombuffer(_read_exact(fh, 8 * out_dim), dtype="<f8")
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
        acts.append(ACTIVATIONS[code])
    return Mlp(weights, biases, acts)


def save_mlp(path, net: Mlp) -> None:
    with open(path, "wb") as fh:
        write_mlp(fh, net)


def load_mlp(path) -> Mlp:
    with open(Path(path), "rb") as fh:
        return read_mlp(fh)
