"""Minimal feed-forward network with reverse-mode gradients and Adam.

Hidden layers use tanh, the output layer is linear. Everything is plain
numpy; inputs may be single vectors of shape (D,) or batches of shape
(B, D). Both diffusion models share this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError

Grads = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class Network:
    sizes: list[int]
    weights: list[np.ndarray]  # weights[l] has shape (sizes[l+1], sizes[l])
    biases: list[np.ndarray]


@dataclass
class OptimizerState:
    """Adam accumulators; shapes mirror the network's parameters."""

    m_w: list[np.ndarray]
    v_w: list[np.ndarray]
    m_b: list[np.ndarray]
    v_b: list[np.ndarray]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainConfig:
    """Shared training hyperparameters for both diffusion models.

    final_learning_rate enables a linear decay across the run;
    ema_decay keeps an exponential moving average of the parameters
    that replaces the raw weights when training finishes.
    """

    steps: int = 20000
    batch_size: int = 64
    learning_rate: float = 1e-3
    final_learning_rate: float | None = None
    ema_decay: float | None = None
    hidden_width: int = 32
    hidden_depth: int = 3
    val_interval: int = 1000
    val_draws: int = 256


class ParameterAverage:
    """Exponential moving average over a network's parameters."""

    def __init__(self, net: Network, decay: float):
        self.decay = decay
        self.weights = [w.copy() for w in net.weights]
        self.biases = [b.copy() for b in net.biases]

    def update(self, net: Network) -> None:
        d = self.decay
        for l in range(len(net.weights)):
            self.weights[l] = d * self.weights[l] + (1.0 - d) * net.weights[l]
            self.biases[l] = d * self.biases[l] + (1.0 - d) * net.biases[l]

    def copy_to(self, net: Network) -> None:
        net.weights = [w.copy() for w in self.weights]
        net.biases = [b.copy() for b in self.biases]


def init_network(layer_sizes: list[int], seed: int) -> Network:
    """Create a network with zero-mean scaled-uniform weights, zero biases.

    Deterministic for a fixed seed. Requires at least an input and an
    output layer, all sizes >= 1.
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise ValueError(f"need at least 2 layers, got sizes {sizes}")
    if any(s < 1 for s in sizes):
        raise ValueError(f"all layer sizes must be >= 1, got {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Network(sizes=sizes, weights=weights, biases=biases)


def _check_input(net: Network, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.sizes[0]:
        raise ValueError(
            f"input dimension {x.shape[-1]} does not match first layer {net.sizes[0]}"
        )
    return x


def forward(net: Network, x: np.ndarray) -> np.ndarray:
    """Pure forward pass; tanh hidden activations, linear output."""
    a = _check_input(net, x)
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w.T + b
        if l != last:
            a = np.tanh(a)
    return a


def _forward_cached(net: Network, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    # activations[l] is the input to layer l; activations[-1] is the output
    a = _check_input(net, x)
    acts = [a]
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w.T + b
        if l != last:
            a = np.tanh(a)
        acts.append(a)
    return a, acts


def gradient(net: Network, x: np.ndarray, loss_grad_at_output: np.ndarray) -> Grads:
    """Reverse-mode gradient of loss_grad . forward(net, x) w.r.t. parameters.

    For batched inputs (B, D) with cotangents (B, out), parameter gradients
    are summed over the batch.
    """
    _, acts = _forward_cached(net, x)
    g = np.asarray(loss_grad_at_output, dtype=float)
    if g.shape != acts[-1].shape:
        raise ValueError(f"cotangent shape {g.shape} != output shape {acts[-1].shape}")
    batched = g.ndim == 2
    grads: Grads = [None] * len(net.weights)  # type: ignore[list-item]
    last = len(net.weights) - 1
    for l in range(last, -1, -1):
        if l != last:
            g = g * (1.0 - acts[l + 1] ** 2)  # tanh'
        a_in = acts[l]
        if batched:
            dw = g.T @ a_in
            db = g.sum(axis=0)
        else:
            dw = np.outer(g, a_in)
            db = g.copy()
        grads[l] = (dw, db)
        g = g @ net.weights[l]
    return grads


def init_optimizer(net: Network, learning_rate: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> OptimizerState:
    return OptimizerState(
        m_w=[np.zeros_like(w) for w in net.weights],
        v_w=[np.zeros_like(w) for w in net.weights],
        m_b=[np.zeros_like(b) for b in net.biases],
        v_b=[np.zeros_like(b) for b in net.biases],
        learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps,
    )


def optimizer_step(net: Network, grads: Grads, state: OptimizerState) -> tuple[Network, OptimizerState]:
    """One Adam update, applied in place; returns (net, state) for chaining."""
    for dw, db in grads:
        if not (np.isfinite(dw).all() and np.isfinite(db).all()):
            raise NumericError("non-finite gradient component in optimizer step")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    scale = state.learning_rate * math.sqrt(corr2) / corr1
    for l, (dw, db) in enumerate(grads):
        state.m_w[l] = b1 * state.m_w[l] + (1 - b1) * dw
        state.v_w[l] = b2 * state.v_w[l] + (1 - b2) * dw * dw
        state.m_b[l] = b1 * state.m_b[l] + (1 - b1) * db
        state.v_b[l] = b2 * state.v_b[l] + (1 - b2) * db * db
        net.weights[l] -= scale * state.m_w[l] / (np.sqrt(state.v_w[l]) + state.eps)
        net.biases[l] -= scale * state.m_b[l] / (np.sqrt(state.v_b[l]) + state.eps)
    return net, state


def _flatten_params(net: Network) -> np.ndarray:
    parts = []
    for w, b in zip(net.weights, net.biases):
        parts.append(w.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def _write_params(net: Network, theta: np.ndarray) -> None:
    i = 0
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        net.weights[l] = theta[i:i + w.size].reshape(w.shape).copy()
        i += w.size
        net.biases[l] = theta[i:i + b.size].reshape(b.shape).copy()
        i += b.size


def gradcheck(net: Network, seed: int, n_params: int = 100, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Uses a random input and a random output cotangent; checks a random
    subset of n_params parameters. Relative error is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12).
    """
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(net.sizes[0])
    v = rng.standard_normal(net.sizes[-1])
    analytic = gradient(net, x, v)
    flat_analytic = np.concatenate(
        [np.concatenate([dw.ravel(), db.ravel()]) for dw, db in analytic])
    theta = _flatten_params(net)
    idx = rng.choice(theta.size, size=min(n_params, theta.size), replace=False)
    worst = 0.0
    for i in idx:
        tp = theta.copy(); tp[i] += h
        tm = theta.copy(); tm[i] -= h
        _write_params(net, tp)
        fp = float(forward(net, x) @ v)
        _write_params(net, tm)
        fm = float(forward(net, x) @ v)
        numeric = (fp - fm) / (2 * h)
        a = flat_analytic[i]
        rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
        worst = max(worst, rel)
    _write_params(net, theta)
    return worst


def time_embedding(t: np.ndarray | float, period: float) -> np.ndarray:
    """Smooth 3-dim embedding of a time step: (t/T, sin(2*pi*t/T), cos(2*pi*t/T)).

    period is the total step count T for discrete chains, 1.0 for
    continuous time on [0, 1].
    """
    frac = np.asarray(t, dtype=float) / period
    emb = np.stack([frac, np.sin(2 * np.pi * frac), np.cos(2 * np.pi * frac)], axis=-1)
    return emb


def net_to_dict(net: Network, state: OptimizerState | None = None) -> dict:
    """JSON-ready checkpoint dict: layer sizes, row-major flat parameters."""
    d: dict = {
        "sizes": list(net.sizes),
        "weights": [w.ravel().tolist() for w in net.weights],
        "biases": [b.tolist() for b in net.biases],
    }
    if state is not None:
        d["optimizer"] = {
            "m_w": [m.ravel().tolist() for m in state.m_w],
            "v_w": [v.ravel().tolist() for v in state.v_w],
            "m_b": [m.tolist() for m in state.m_b],
            "v_b": [v.tolist() for v in state.v_b],
            "step": state.step,
            "learning_rate": state.learning_rate,
            "beta1": state.beta1,
            "beta2": state.beta2,
            "eps": state.eps,
        }
    return d


def net_from_dict(d: dict) -> Network:
    sizes = [int(s) for s in d["sizes"]]
    weights, biases = [], []
    for l, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weights.append(np.asarray(d["weights"][l], dtype=float).reshape(fan_out, fan_in))
        biases.append(np.asarray(d["biases"][l], dtype=float))
    return Network(sizes=sizes, weights=weights, biases=biases)
