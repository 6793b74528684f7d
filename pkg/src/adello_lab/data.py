"""Synthetic long-tailed Gaussian tasks, splits, feature-space augmentation and Bayes scorers."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp


@dataclass(frozen=True)
class LongTailSpec:
    K: int
    N1: int
    gamma_l: float
    gamma_u: float
    M1: int
    # fraction of extra unlabeled samples drawn from a class with no labeled counterpart
    ood_fraction: float = 0.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.N1 < 1 or self.M1 < 1:
            raise ValueError("head-class counts N1 and M1 must be >= 1")
        if not (self.gamma_l > 0 and self.gamma_u > 0):
            raise ValueError("imbalance ratios must be positive")
        if not 0.0 <= self.ood_fraction < 1.0:
            raise ValueError("ood_fraction must lie in [0, 1)")

    @property
    def labeled_counts(self) -> np.ndarray:
        return lt_class_counts(self.N1, self.gamma_l, self.K)

    @property
    def unlabeled_counts(self) -> np.ndarray:
        return lt_class_counts(self.M1, self.gamma_u, self.K)


@dataclass(frozen=True)
class AugmentConfig:
    weak_sigma: float = 0.1
    strong_sigma: float = 0.5
    strong_dropout: float = 0.1

    def __post_init__(self):
        if self.weak_sigma < 0 or self.strong_sigma < self.weak_sigma:
            raise ValueError("need 0 <= weak_sigma <= strong_sigma")
        if not 0.0 <= self.strong_dropout <= 1.0:
            raise ValueError("strong_dropout must lie in [0, 1]")


@dataclass(frozen=True)
class SyntheticTask:
    """Isotropic Gaussian classes sharing one covariance ``sigma**2 * I``.

    ``ood_mean`` is an extra component used only for out-of-distribution
    unlabeled samples.
    """

    means: np.ndarray
    sigma: float
    seed: int
    ood_mean: np.ndarray
    labeled_prior: np.ndarray = field(default=None)
    unlabeled_prior: np.ndarray = field(default=None)

    def __post_init__(self):
        K = self.means.shape[0]
        for name in ("labeled_prior", "unlabeled_prior"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, np.full(K, 1.0 / K))

    @property
    def K(self) -> int:
        return self.means.shape[0]

    @property
    def D(self) -> int:
        return self.means.shape[1]

    def with_priors(self, spec: LongTailSpec) -> "SyntheticTask":
        """Copy carrying the labeled/unlabeled class marginals implied by ``spec``."""
        n, m = spec.labeled_counts, spec.unlabeled_counts
        return replace(self, labeled_prior=n / n.sum(), unlabeled_prior=m / m.sum())

    def sample(self, labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw one feature vector per label; label ``K`` selects the OOD component."""
        centers = np.vstack([self.means, self.ood_mean])[labels]
        return centers + self.sigma * rng.standard_normal(centers.shape)


class HiddenLabelError(PermissionError):
    pass


@dataclass
class DataSplit:
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    K: int
    _y_unlabeled: np.ndarray = field(repr=False)

    @property
    def labeled_prior(self) -> np.ndarray:
        counts = np.bincount(self.y_labeled, minlength=self.K)
        return counts / counts.sum()

    def hidden_unlabeled_labels(self, diagnostics: bool = False) -> np.ndarray:
        """Ground truth for the unlabeled pool (``K`` marks OOD samples); diagnostics only."""
        if not diagnostics:
            raise HiddenLabelError("unlabeled ground truth is only available with diagnostics enabled")
        return self._y_unlabeled


def lt_class_counts(base: int, gamma: float, K: int) -> np.ndarray:
    """``round(base * gamma ** -((k-1)/(K-1)))`` for k = 1..K, half-up, at least 1."""
    if K < 2:
        raise ValueError("K must be >= 2")
    kappa = np.arange(K) / (K - 1)
    raw = base * np.power(float(gamma), -kappa)
    return np.maximum(np.floor(raw + 0.5), 1).astype(int)


def make_task(D: int, K: int, separation: float, sigma: float, seed: int, max_tries: int = 10_000) -> SyntheticTask:
    """Place ``K`` class means (plus one OOD mean) at pairwise distance >= separation * sigma.

    Means are rejection-sampled in a cube just large enough to pack them.
    """
    if D < 2:
        raise ValueError("D must be >= 2")
    if not (separation > 0 and sigma > 0):
        raise ValueError("separation and sigma must be positive")
    rng = np.random.default_rng(seed)
    min_dist = separation * sigma
    half_side = 0.5 * min_dist * (K + 1) ** (1.0 / D) * 1.5
    means: list[np.ndarray] = []
    tries = 0
    while len(means) < K + 1:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not place {K} means with separation {separation} after {max_tries} tries")
        cand = rng.uniform(-half_side, half_side, size=D)
        if all(np.linalg.norm(cand - m) >= min_dist for m in means):
            means.append(cand)
    arr = np.array(means)
    return SyntheticTask(means=arr[:K], sigma=float(sigma), seed=seed, ood_mean=arr[K])


def sample_split(task: SyntheticTask, spec: LongTailSpec, test_per_class: int, seed: int) -> DataSplit:
    """Draw labeled, unlabeled and balanced test sets; all use the same class-conditionals."""
    if spec.K != task.K:
        raise ValueError(f"spec has K={spec.K} but task has K={task.K}")
    rng = np.random.default_rng(seed)
    y_l = np.repeat(np.arange(task.K), spec.labeled_counts)
    y_u = np.repeat(np.arange(task.K), spec.unlabeled_counts)
    if spec.ood_fraction > 0:
        n_ood = int(round(spec.ood_fraction * len(y_u) / (1.0 - spec.ood_fraction)))
        y_u = np.concatenate([y_u, np.full(n_ood, task.K)])
    y_t = np.repeat(np.arange(task.K), test_per_class)

    x_l = task.sample(y_l, rng)
    x_u = task.sample(y_u, rng)
    x_t = task.sample(y_t, rng)
    perm = rng.permutation(len(y_u))
    return DataSplit(x_l, y_l, x_u[perm], x_t, y_t, task.K, _y_unlabeled=y_u[perm])


def weak_augment(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if cfg.weak_sigma == 0:
        return x.copy()
    return x + cfg.weak_sigma * rng.standard_normal(x.shape)


def strong_augment(x, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise of scale ``strong_sigma`` followed by per-coordinate dropout."""
    x = np.asarray(x, dtype=float)
    out = x + cfg.strong_sigma * rng.standard_normal(x.shape) if cfg.strong_sigma else x.copy()
    if cfg.strong_dropout:
        out = np.where(rng.random(x.shape) < cfg.strong_dropout, 0.0, out)
    return out


def bayes_log_joint(task: SyntheticTask, x, prior) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    sq = ((x[:, None, :] - task.means[None, :, :]) ** 2).sum(axis=-1)
    with np.errstate(divide="ignore"):
        return -0.5 * sq / task.sigma**2 + np.log(np.asarray(prior, dtype=float))


def bayes_posterior(task: SyntheticTask, x, prior) -> np.ndarray:
    """Closed-form posterior ``N(x; mu_k, sigma^2 I) * prior_k``, normalized.

    With the labeled prior this is g_L, with the unlabeled prior g_U, with a
    uniform prior the balanced scorer g_B. Accepts a single point or a batch.
    """
    x = np.asarray(x, dtype=float)
    lj = bayes_log_joint(task, x, prior)
    post = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return post[0] if x.ndim == 1 else post


def reweight_posterior(post, from_prior, to_prior) -> np.ndarray:
    """Move a posterior between priors: ``post * to / from``, renormalized."""
    w = np.asarray(post, dtype=float) * (np.asarray(to_prior, dtype=float) / np.asarray(from_prior, dtype=float))
    return w / w.sum(axis=-1, keepdims=True)


def bayes_accuracy(task: SyntheticTask, x, prior) -> float:
    """Expected accuracy of the Bayes rule at points ``x``: mean of the max posterior."""
    return float(bayes_posterior(task, np.atleast_2d(x), prior).max(axis=1).mean())


SPLIT_COLUMNS_TAIL = ("label", "split")


def write_split_csv(path, split: DataSplit, diagnostics: bool = False) -> Path:
    """One row per sample: feature_0..feature_{D-1}, label, split.

    Unlabeled rows carry an empty label unless ``diagnostics`` reveals the hidden truth.
    """
    path = Path(path)
    D = split.x_labeled.shape[1]
    y_u = split.hidden_unlabeled_labels(True) if diagnostics else [None] * len(split.x_unlabeled)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"feature_{i}" for i in range(D)] + list(SPLIT_COLUMNS_TAIL))
        for tag, X, Y in (
            ("labeled", split.x_labeled, split.y_labeled),
            ("unlabeled", split.x_unlabeled, y_u),
            ("test", split.x_test, split.y_test),
        ):
            for row, lab in zip(X, Y):
                w.writerow([repr(float(v)) for v in row] + ["" if lab is None else int(lab), tag])
    return path


def read_split_csv(path) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Inverse of :func:`write_split_csv`; missing labels come back as -1."""
    rows: dict[str, tuple[list, list]] = {}
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        D = len(header) - 2
        for rec in reader:
            xs, ys = rows.setdefault(rec[-1], ([], []))
            xs.append([float(v) for v in rec[:D]])
            ys.append(int(rec[D]) if rec[D] != "" else -1)
    return {k: (np.array(xs), np.array(ys)) for k, (xs, ys) in rows.items()}


def expected_bayes_accuracy_mc(task: SyntheticTask, prior, n: int, seed: int) -> tuple[float, float]:
    """(empirical accuracy of the Bayes rule, closed-form expected accuracy) on ``n`` draws from ``prior``."""
    rng = np.random.default_rng(seed)
    y = rng.choice(task.K, size=n, p=np.asarray(prior, dtype=float))
    x = task.sample(y, rng)
    post = bayes_posterior(task, x, prior)
    return float((post.argmax(axis=1) == y).mean()), float(post.max(axis=1).mean())

