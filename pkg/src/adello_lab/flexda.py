"""Flexible distribution alignment: priors, the debiasing schedule and loss targets.

Each ``*_targets`` constructor returns a :class:`MaskedBatchTargets`; feeding
one into :func:`adello_lab.math_core.loss_gradients` together with the right
view's features evaluates the corresponding loss term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .math_core import kl_divergence, softmax

EPS = 1e-8


def as_prior(probs, tol: float = 1e-9) -> np.ndarray:
    """Validate a class marginal and return it as a float array."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size < 1:
        raise ValueError("a class prior must be a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > tol:
        raise ValueError(f"not a point on the simplex: {p}")
    return p


def uniform_prior(K: int) -> np.ndarray:
    return np.full(K, 1.0 / K)


@dataclass(frozen=True)
class DebiasSchedule:
    d: float = 2.0
    alpha_min: float = 0.1
    t_total: int = 20_000

    def __post_init__(self):
        if self.d < 0:
            raise ValueError(f"schedule speed d must be >= 0, got {self.d}")
        if not 0.0 <= self.alpha_min <= 1.0:
            raise ValueError(f"alpha_min must lie in [0, 1], got {self.alpha_min}")
        if self.t_total < 1:
            raise ValueError("t_total must be a positive integer")


def schedule_alpha(t: int, sched: DebiasSchedule) -> float:
    """alpha_t = 1 - (1 - alpha_min) * (t / t_total) ** d."""
    if not 0 <= t <= sched.t_total:
        raise ValueError(f"step {t} outside [0, {sched.t_total}]")
    if t == sched.t_total:
        return float(sched.alpha_min)
    return 1.0 - (1.0 - sched.alpha_min) * (t / sched.t_total) ** sched.d


def smooth_prior(q, alpha: float, eps: float = EPS) -> np.ndarray:
    """Normalized elementwise power ``q ** alpha``; alpha=1 is identity, alpha=0 uniform."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    q = np.maximum(np.asarray(q, dtype=float), eps)
    if alpha == 0.0:
        return uniform_prior(q.size)
    # work in log space so small alpha does not lose the ordering
    lw = alpha * np.log(q)
    w = np.exp(lw - lw.max())
    return w / w.sum()


@dataclass
class PriorTracker:
    """EMA estimate of the unlabeled class marginal from weak-view predictions."""

    estimate: np.ndarray
    beta: float = 0.999
    eps: float = EPS
    history: list[tuple[int, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        self.estimate = as_prior(self.estimate)
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")

    @classmethod
    def uniform(cls, K: int, beta: float = 0.999) -> "PriorTracker":
        return cls(uniform_prior(K), beta)

    def snapshot(self, step: int) -> None:
        self.history.append((step, self.estimate.copy()))


def update_prior(tracker: PriorTracker, batch_mean_probs) -> PriorTracker:
    """Q <- beta * Q + (1 - beta) * batch mean, renormalized to stay on the simplex."""
    m = np.asarray(batch_mean_probs, dtype=float)
    q = tracker.beta * tracker.estimate + (1.0 - tracker.beta) * m
    tracker.estimate = q / q.sum()
    return tracker


def infer_temperature(q, eps: float = EPS) -> float:
    """Distillation temperature exp(KL(uniform || q)); 1 for a balanced estimate."""
    q = np.asarray(q, dtype=float)
    return float(np.exp(kl_divergence(uniform_prior(q.size), q, eps)))


def confidence_mask(weak_probs, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """(mask, hard labels): mask is 1 where max prob >= tau; argmax picks the lowest index on ties."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    p = np.atleast_2d(np.asarray(weak_probs, dtype=float))
    mask = (p.max(axis=1) >= tau).astype(float)
    return mask, p.argmax(axis=1)


@dataclass
class MaskedBatchTargets:
    targets: np.ndarray  # (B, K)
    weights: np.ndarray  # (B,)
    offsets: np.ndarray  # (K,) shared by every row, or (B, K)
    temperature: float = 1.0

    @property
    def active(self) -> bool:
        return bool(np.any(self.weights))


def log_ratio(num, den, eps: float = EPS) -> np.ndarray:
    return np.log(np.maximum(np.asarray(num, dtype=float), eps)) - np.log(np.maximum(np.asarray(den, dtype=float), eps))


def one_hot(labels, K: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, K))
    out[np.arange(labels.size), labels] = 1.0
    return out


def supervised_targets(labels, labeled_prior, target_prior) -> MaskedBatchTargets:
    """Logit-adjusted supervised CE; offset log(P_L / Q_alpha) vanishes when the priors match."""
    K = len(labeled_prior)
    labels = np.asarray(labels, dtype=int)
    return MaskedBatchTargets(
        targets=one_hot(labels, K),
        weights=np.ones(labels.size),
        offsets=log_ratio(labeled_prior, target_prior),
    )


def consistency_targets(hard_labels, mask, estimate, target_prior) -> MaskedBatchTargets:
    """Masked hard-pseudo-label CE on the strong view with offset log(Q / Q_alpha)."""
    K = len(estimate)
    return MaskedBatchTargets(
        targets=one_hot(hard_labels, K),
        weights=np.asarray(mask, dtype=float).copy(),
        offsets=log_ratio(estimate, target_prior),
    )


def ccr_targets(weak_logits, mask, temperature: float, estimate=None, target_prior=None) -> MaskedBatchTargets:
    """Complementary consistency: soft weak-view targets at temperature T on low-confidence rows.

    The target is the unadjusted ``softmax(weak / T)``; only the strong-view
    student carries the prior offset. Pass no priors for the offset-free variant.
    """
    if not temperature > 0:
        raise ValueError("invalid temperature")
    weak_logits = np.asarray(weak_logits, dtype=float)
    K = weak_logits.shape[1]
    if estimate is None:
        offsets = np.zeros(K)
    else:
        offsets = log_ratio(estimate, target_prior)
    return MaskedBatchTargets(
        targets=softmax(weak_logits, temperature),
        weights=1.0 - np.asarray(mask, dtype=float),
        offsets=offsets,
        temperature=float(temperature),
    )


def kd_targets(weak_logits, mask, temperature: float, estimate=None, target_prior=None) -> MaskedBatchTargets:
    """Same as :func:`ccr_targets` but distils every sample regardless of the mask."""
    out = ccr_targets(weak_logits, mask, temperature, estimate, target_prior)
    out.weights = np.ones_like(out.weights)
    return out
