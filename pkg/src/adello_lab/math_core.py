"""Numerical primitives and a one-hidden-layer MLP trained with hand-written backprop.

Every loss in the package is a weighted cross-entropy between a target
distribution and ``softmax((f(x) + offset) / T)``, so a single backward pass
(:func:`loss_gradients`) serves all of them.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

PARAM_NAMES = ("W1", "b1", "W2", "b2")
DECAYED = ("W1", "W2")

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda h: 1.0 - h * h),
    "softplus": (
        lambda a: np.logaddexp(0.0, a),
        lambda h: -np.expm1(-h),  # sigmoid(a) written in terms of h = softplus(a)
    ),
}


class NumericalError(FloatingPointError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    nesterov: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"learning rate must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema decay must lie in [0, 1), got {self.ema_decay}")


@dataclass
class ClassifierState:
    """Live parameters, Nesterov buffers and the EMA shadow copy."""

    params: dict[str, np.ndarray]
    activation: str = "tanh"
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    shadow: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.velocity:
            self.velocity = {k: np.zeros_like(v) for k, v in self.params.items()}
        if not self.shadow:
            self.shadow = {k: v.copy() for k, v in self.params.items()}

    @property
    def dims(self) -> tuple[int, int, int]:
        D, H = self.params["W1"].shape
        return D, H, self.params["W2"].shape[1]

    def copy(self) -> "ClassifierState":
        return copy.deepcopy(self)

    def shadow_view(self) -> "ClassifierState":
        """A state whose live parameters are this state's EMA shadow."""
        return ClassifierState(
            params={k: v.copy() for k, v in self.shadow.items()},
            activation=self.activation,
            step=self.step,
        )


def init_classifier(D: int, H: int, K: int, rng: np.random.Generator, activation: str = "tanh") -> ClassifierState:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    s1, s2 = 1.0 / np.sqrt(D), 1.0 / np.sqrt(H)
    params = {
        "W1": rng.uniform(-s1, s1, size=(D, H)),
        "b1": np.zeros(H),
        "W2": rng.uniform(-s2, s2, size=(H, K)),
        "b2": np.zeros(K),
    }
    return ClassifierState(params=params, activation=activation)


def log_softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax over the last axis, max-shifted for stability."""
    logits = np.asarray(logits, dtype=float)
    if not np.all(np.isfinite(logits)):
        raise ValueError("non-finite logits")
    if not temperature > 0:
        raise ValueError("invalid temperature")
    z = logits / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(target, logits) -> float | np.ndarray:
    """H(target, softmax(logits)); returns one value per row for 2-d input."""
    target = np.asarray(target, dtype=float)
    logits = np.asarray(logits, dtype=float)
    if target.shape != logits.shape:
        raise ValueError(f"shape mismatch: target {target.shape} vs logits {logits.shape}")
    # 0 * log(0) is taken as 0 even for -inf log-probs.
    lp = log_softmax(logits)
    out = -np.where(target > 0, target * lp, 0.0).sum(axis=-1)
    return float(out) if out.ndim == 0 else out


def entropy(p) -> float:
    p = np.asarray(p, dtype=float)
    nz = p > 0
    return float(-(p[nz] * np.log(p[nz])).sum())


def kl_divergence(p, q, epsilon: float = 1e-8) -> float:
    """KL(p || q) with q clamped at ``epsilon`` and 0 log 0 = 0."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    nz = p > 0
    return float((p[nz] * np.log(p[nz] / np.maximum(q[nz], epsilon))).sum())


def _check_input(state: ClassifierState, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != state.dims[0]:
        raise ValueError(f"expected features of shape (B, {state.dims[0]}), got {X.shape}")
    return X


def _forward_cache(params, activation, X):
    act, _ = _ACTIVATIONS[activation]
    h = act(X @ params["W1"] + params["b1"])
    return h, h @ params["W2"] + params["b2"]


def forward(state: ClassifierState, X) -> np.ndarray:
    """Logits of shape (B, K) from the live parameters."""
    X = _check_input(state, X)
    return _forward_cache(state.params, state.activation, X)[1]


def backprop(state: ClassifierState, X, h, dlogits) -> dict[str, np.ndarray]:
    """Parameter gradients given dL/dlogits and the cached hidden activations."""
    _, dact = _ACTIVATIONS[state.activation]
    W2 = state.params["W2"]
    dpre = (dlogits @ W2.T) * dact(h)
    return {
        "W1": X.T @ dpre,
        "b1": dpre.sum(axis=0),
        "W2": h.T @ dlogits,
        "b2": dlogits.sum(axis=0),
    }


@dataclass
class LossResult:
    loss: float
    grads: dict[str, np.ndarray]
    # dL / d(f(x) + offset), shape (B, K)
    dlogits: np.ndarray


def loss_gradients(state: ClassifierState, X, targets, offsets=None, weights=None, temperature: float = 1.0) -> LossResult:
    """Mean over rows of ``w_b * H(t_b, softmax((f(x_b) + o_b) / T))`` and its exact gradient."""
    X = _check_input(state, X)
    B = X.shape[0]
    K = state.dims[2]
    targets = np.asarray(targets, dtype=float)
    if targets.shape != (B, K):
        raise ValueError(f"targets must have shape {(B, K)}, got {targets.shape}")
    offsets = np.zeros((B, K)) if offsets is None else np.broadcast_to(np.asarray(offsets, dtype=float), (B, K))
    weights = np.ones(B) if weights is None else np.asarray(weights, dtype=float).reshape(B)
    if not temperature > 0:
        raise ValueError("invalid temperature")
    if not (np.all(np.isfinite(offsets)) and np.all(np.isfinite(weights))):
        raise ValueError("offsets and weights must be finite")

    h, z = _forward_cache(state.params, state.activation, X)
    with np.errstate(over="ignore"):
        adjusted = (z + offsets) / temperature
    if not np.all(np.isfinite(adjusted)):
        raise NumericalError("numerical overflow")
    lp = log_softmax(adjusted)
    per_row = -np.where(targets > 0, targets * lp, 0.0).sum(axis=1)
    loss = float((weights * per_row).sum() / B)
    dlogits = weights[:, None] * (np.exp(lp) - targets) / (temperature * B)
    grads = backprop(state, X, h, dlogits)
    if not (np.isfinite(loss) and all(np.all(np.isfinite(g)) for g in grads.values())):
        raise NumericalError("numerical overflow")
    return LossResult(loss, grads, dlogits)


def sgd_step(state: ClassifierState, grads: dict[str, np.ndarray], config: OptimizerConfig) -> ClassifierState:
    """In-place SGD step with (Nesterov) momentum and L2 decay on weight matrices."""
    mu = config.momentum
    for name in PARAM_NAMES:
        p = state.params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
        if config.weight_decay and name in DECAYED:
            g = g + config.weight_decay * p
        v = state.velocity[name]
        v *= mu
        v += g
        p -= config.lr * (g + mu * v if config.nesterov else v)
    state.step += 1
    return state


def ema_update(state: ClassifierState, decay: float) -> ClassifierState:
    """shadow <- decay * shadow + (1 - decay) * live."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    for name, live in state.params.items():
        sh = state.shadow[name]
        sh *= decay
        sh += (1.0 - decay) * live
    return state
