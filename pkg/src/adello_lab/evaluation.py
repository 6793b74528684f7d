"""Balanced accuracy, reliability binning, ECE/MCE, Friedman ranks and prior-tracking traces."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .math_core import kl_divergence


def balanced_accuracy(predictions, labels, K: int) -> float:
    """Mean per-class recall over the classes present in ``labels``."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("balanced accuracy of an empty evaluation set")
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in shape")
    if labels.min() < 0 or labels.max() >= K:
        raise ValueError(f"labels must be class indices < {K}")
    support = np.bincount(labels, minlength=K)
    hits = np.bincount(labels[predictions == labels], minlength=K)
    present = support > 0
    return float(np.mean(hits[present] / support[present]))


@dataclass
class ReliabilityBins:
    edges: np.ndarray  # M + 1 boundaries
    counts: np.ndarray
    conf: np.ndarray  # mean confidence, 0 for empty bins
    acc: np.ndarray

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def gaps(self) -> np.ndarray:
        return np.abs(self.acc - self.conf)


def bin_index(confidences, M: int) -> np.ndarray:
    """Bin m (0-based) covers (m/M, (m+1)/M]; the first bin also takes 0."""
    # searchsorted on the float edges keeps c == m/M out of bin m+1, which c * M would not
    edges = np.arange(M + 1) / M
    c = np.asarray(confidences, dtype=float)
    return np.clip(np.searchsorted(edges, c, side="left") - 1, 0, M - 1)


def bin_predictions(max_probs, correct, M: int = 15) -> ReliabilityBins:
    if M < 1:
        raise ValueError("need at least one bin")
    c = np.asarray(max_probs, dtype=float)
    ok = np.asarray(correct, dtype=float)
    if np.any((c < 0) | (c > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    idx = bin_index(c, M)
    counts = np.bincount(idx, minlength=M)
    conf_sum = np.bincount(idx, weights=c, minlength=M)
    acc_sum = np.bincount(idx, weights=ok, minlength=M)
    safe = np.maximum(counts, 1)
    return ReliabilityBins(np.arange(M + 1) / M, counts, conf_sum / safe, acc_sum / safe)


def ece(bins: ReliabilityBins, n: int | None = None) -> float:
    n = bins.n if n is None else n
    if n <= 0:
        raise ValueError("ECE of zero samples")
    return float((bins.counts / n * bins.gaps).sum())


def mce(bins: ReliabilityBins) -> float:
    filled = bins.counts > 0
    if not filled.any():
        raise ValueError("MCE needs at least one non-empty bin")
    return float(bins.gaps[filled].max())


def calibration(probs, labels, M: int = 15) -> tuple[float, float, ReliabilityBins]:
    """(ECE, MCE, bins) of argmax predictions from a probability matrix."""
    probs = np.asarray(probs, dtype=float)
    bins = bin_predictions(probs.max(axis=1), probs.argmax(axis=1) == np.asarray(labels), M)
    return ece(bins), mce(bins), bins


BIN_COLUMNS = ("bin_low", "bin_high", "count", "conf", "acc")


def write_bins_csv(path, bins: ReliabilityBins) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BIN_COLUMNS)
        for lo, hi, n, c, a in zip(bins.edges[:-1], bins.edges[1:], bins.counts, bins.conf, bins.acc):
            w.writerow([repr(float(lo)), repr(float(hi)), int(n), repr(float(c)), repr(float(a))])
    return path


def friedman_rank(table, higher_is_better: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Per-method mean rank over settings (columns) and the final 1-based ordering.

    Ties within a column share the average rank; ties in mean rank keep row order.
    """
    scores = np.asarray(table, dtype=float)
    if scores.ndim != 2 or scores.shape[0] < 2 or scores.shape[1] < 1:
        raise ValueError("need a methods x settings table with >= 2 methods and >= 1 setting")
    if not np.all(np.isfinite(scores)):
        raise ValueError("score table has missing entries")
    keyed = -scores if higher_is_better else scores
    ranks = rankdata(keyed, method="average", axis=0)
    mean_rank = ranks.mean(axis=1)
    order = np.argsort(mean_rank, kind="stable")
    final = np.empty(len(order), dtype=int)
    final[order] = np.arange(1, len(order) + 1)
    return mean_rank, final


def prior_kl_trace(snapshots, true_prior, balanced=None) -> list[tuple[int, float, float]]:
    """(step, KL(est || true), KL(est || uniform)) for each tracker snapshot."""
    true_prior = np.asarray(true_prior, dtype=float)
    balanced = np.full(true_prior.size, 1.0 / true_prior.size) if balanced is None else np.asarray(balanced, dtype=float)
    return [(int(step), kl_divergence(q, true_prior), kl_divergence(q, balanced)) for step, q in snapshots]
