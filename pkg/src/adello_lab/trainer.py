"""Step-indexed training loop for FixMatch, ADELLO and its ablation variants."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import flexda
from .data import AugmentConfig, DataSplit, SyntheticTask, strong_augment, weak_augment
from .evaluation import balanced_accuracy, calibration
from .flexda import DebiasSchedule, MaskedBatchTargets, PriorTracker
from .math_core import (
    ClassifierState,
    NumericalError,
    OptimizerConfig,
    ema_update,
    forward,
    init_classifier,
    kl_divergence,
    loss_gradients,
    sgd_step,
    softmax,
)

log = logging.getLogger(__name__)

VARIANTS = ("supervised", "fixmatch", "flexda", "ccr", "adello", "flexda_kd")
ADJUSTED = {"flexda", "adello", "flexda_kd"}
DISTILLED = {"ccr", "adello", "flexda_kd"}

# Column order of a RunReport record.
RECORD_FIELDS = (
    "step",
    "loss_total",
    "loss_sup",
    "loss_cons",
    "loss_ccr",
    "mask_rate",
    "comp_mask_rate",
    "alpha",
    "temperature",
    "kl_est_true",
    "kl_est_uniform",
    "balanced_accuracy",
    "ece",
    "mce",
)


@dataclass
class TrainConfig:
    variant: str = "adello"
    batch_size: int = 64
    mu: int = 2
    tau: float = 0.95
    schedule: DebiasSchedule = field(default_factory=DebiasSchedule)
    # None -> 20% of t_total
    t_warmup: int | None = None
    lambda_u: float = 1.0
    lambda_uc: float = 1.0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    prior_beta: float = 0.999
    hidden: int = 32
    activation: str = "tanh"
    eval_interval: int = 500
    final_window: int = 10
    bins: int = 15
    seed: int = 1
    diagnostics: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.t_warmup is None:
            self.t_warmup = self.t_total // 5
        if not 0 <= self.t_warmup <= self.t_total:
            raise ValueError(f"t_warmup must lie in [0, t_total={self.t_total}]")
        if self.batch_size < 1 or self.mu < 1:
            raise ValueError("batch_size and mu must be positive integers")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.lambda_u < 0 or self.lambda_uc < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.eval_interval < 1 or self.final_window < 1:
            raise ValueError("eval_interval and final_window must be positive")

    @property
    def t_total(self) -> int:
        return self.schedule.t_total


@dataclass
class LossTerm:
    name: str  # "sup", "cons" or "ccr"
    view: str  # "labeled_weak" or "unlabeled_strong"
    weight: float
    targets: MaskedBatchTargets


@dataclass
class BatchState:
    """What the loss constructors need to know about the current step."""

    labels: np.ndarray
    labeled_prior: np.ndarray
    estimate: np.ndarray
    target_prior: np.ndarray
    weak_logits: np.ndarray | None
    mask: np.ndarray | None
    hard_labels: np.ndarray | None
    temperature: float
    t_warmup: int
    lambda_u: float = 1.0
    lambda_uc: float = 1.0


def variant_losses(variant: str, step: int, batch: BatchState) -> list[LossTerm]:
    """Loss terms for one step.

    supervised: plain CE. fixmatch: CE + masked hard-PL consistency.
    flexda: both terms prior-adjusted. ccr: fixmatch + offset-free distillation
    of low-confidence samples. adello: flexda + adjusted distillation.
    flexda_kd: adello but distilling every sample. Distillation only runs once
    ``step >= t_warmup``.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    adjusted = variant in ADJUSTED
    K = len(batch.labeled_prior)
    target = batch.target_prior if adjusted else batch.labeled_prior
    terms = [LossTerm("sup", "labeled_weak", 1.0, flexda.supervised_targets(batch.labels, batch.labeled_prior, target))]
    if variant == "supervised":
        return terms

    estimate = batch.estimate if adjusted else flexda.uniform_prior(K)
    cons_target = batch.target_prior if adjusted else estimate
    terms.append(
        LossTerm(
            "cons",
            "unlabeled_strong",
            batch.lambda_u,
            flexda.consistency_targets(batch.hard_labels, batch.mask, estimate, cons_target),
        )
    )
    if variant in DISTILLED and step >= batch.t_warmup:
        make = flexda.kd_targets if variant == "flexda_kd" else flexda.ccr_targets
        priors = (batch.estimate, batch.target_prior) if adjusted else (None, None)
        terms.append(
            LossTerm(
                "ccr",
                "unlabeled_strong",
                batch.lambda_uc,
                make(batch.weak_logits, batch.mask, batch.temperature, *priors),
            )
        )
    return terms


@dataclass
class RunReport:
    config: dict
    records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    prior_snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)
    final_test_probs: np.ndarray | None = None
    state: ClassifierState | None = None
    aborted: bool = False

    def final_window_mean(self, key: str, window: int) -> float:
        vals = [r[key] for r in self.records[-window:]]
        return float(np.mean(vals)) if vals else float("nan")


class RunAborted(RuntimeError):
    def __init__(self, message: str, report: RunReport):
        super().__init__(message)
        self.report = report


@dataclass
class StepResult:
    losses: dict[str, float]
    total: float
    grads: dict[str, np.ndarray]
    weak_probs: np.ndarray | None
    mask: np.ndarray | None


def compute_step(
    state: ClassifierState,
    variant: str,
    step: int,
    xl: np.ndarray,
    yl: np.ndarray,
    xu_weak: np.ndarray | None,
    xu_strong: np.ndarray | None,
    labeled_prior,
    estimate,
    target_prior,
    temperature: float,
    cfg: TrainConfig,
) -> StepResult:
    """Losses and summed gradients for one batch, without touching ``state``."""
    weak_logits = weak_probs = mask = hard = None
    if variant != "supervised":
        with np.errstate(over="ignore", invalid="ignore"):
            weak_logits = forward(state, xu_weak)
        if not np.all(np.isfinite(weak_logits)):
            raise NumericalError("non-finite logits")
        weak_probs = softmax(weak_logits)
        mask, hard = flexda.confidence_mask(weak_probs, cfg.tau)
    batch = BatchState(
        labels=yl,
        labeled_prior=labeled_prior,
        estimate=estimate,
        target_prior=target_prior,
        weak_logits=weak_logits,
        mask=mask,
        hard_labels=hard,
        temperature=temperature,
        t_warmup=cfg.t_warmup,
        lambda_u=cfg.lambda_u,
        lambda_uc=cfg.lambda_uc,
    )
    views = {"labeled_weak": xl, "unlabeled_strong": xu_strong}
    losses = {"sup": 0.0, "cons": 0.0, "ccr": 0.0}
    grads = {k: np.zeros_like(v) for k, v in state.params.items()}
    for term in variant_losses(variant, step, batch):
        tg = term.targets
        if term.weight == 0 or not tg.active:
            continue
        res = loss_gradients(state, views[term.view], tg.targets, tg.offsets, tg.weights, tg.temperature)
        losses[term.name] = term.weight * res.loss
        for k in grads:
            grads[k] += term.weight * res.grads[k]
    return StepResult(losses, sum(losses.values()), grads, weak_probs, mask)


def run(
    config: TrainConfig,
    split: DataSplit,
    task: SyntheticTask,
    on_record: Callable[[dict], None] | None = None,
) -> RunReport:
    """Train one model and evaluate its EMA shadow on the balanced test split.

    ``on_record`` receives each evaluation record as soon as it exists, so a
    caller can stream them to disk.
    """
    if split.x_labeled.shape[1] != task.D:
        raise ValueError("split and task disagree on feature dimension")
    cfg = config
    K = task.K
    rng = np.random.default_rng(cfg.seed)
    state = init_classifier(task.D, cfg.hidden, K, rng, cfg.activation)
    tracker = PriorTracker.uniform(K, cfg.prior_beta)
    labeled_prior = split.labeled_prior
    report = RunReport(config=_config_dict(cfg))

    true_q = None
    if cfg.diagnostics:
        yu = split.hidden_unlabeled_labels(diagnostics=True)
        counts = np.bincount(yu[yu < K], minlength=K)
        true_q = counts / counts.sum()

    B, UB = cfg.batch_size, cfg.mu * cfg.batch_size
    n_l, n_u = len(split.y_labeled), len(split.x_unlabeled)
    temperature = 1.0
    warm_step = max(cfg.t_warmup, 1)
    acc_losses = {"sup": 0.0, "cons": 0.0, "ccr": 0.0, "total": 0.0}
    acc_mask = 0.0
    acc_n = 0

    for t in range(1, cfg.t_total + 1):
        alpha = flexda.schedule_alpha(t, cfg.schedule)
        target_prior = flexda.smooth_prior(tracker.estimate, alpha)
        if t == warm_step and cfg.variant in DISTILLED:
            temperature = flexda.infer_temperature(tracker.estimate)
            log.debug("step %d: inferred distillation temperature %.4f", t, temperature)

        li = rng.integers(0, n_l, size=B)
        xl = weak_augment(split.x_labeled[li], cfg.augment, rng)
        yl = split.y_labeled[li]
        xu_w = xu_s = None
        if cfg.variant != "supervised":
            xu = split.x_unlabeled[rng.integers(0, n_u, size=UB)]
            xu_w = weak_augment(xu, cfg.augment, rng)
            xu_s = strong_augment(xu, cfg.augment, rng)

        try:
            res = compute_step(
                state, cfg.variant, t, xl, yl, xu_w, xu_s, labeled_prior, tracker.estimate, target_prior, temperature, cfg
            )
            if not np.isfinite(res.total):
                raise NumericalError("non-finite loss")
            with np.errstate(over="ignore", invalid="ignore"):
                sgd_step(state, res.grads, cfg.optimizer)
                ema_update(state, cfg.optimizer.ema_decay)
            if not all(np.all(np.isfinite(v)) for v in state.shadow.values()):
                raise NumericalError("non-finite parameters")
        except NumericalError as exc:
            rec = {k: float("nan") for k in RECORD_FIELDS}
            rec["step"] = t
            report.records.append(rec)
            report.aborted = True
            if on_record:
                on_record(rec)
            raise RunAborted(f"run aborted at step {t}: {exc}", report) from exc

        if res.weak_probs is not None:
            flexda.update_prior(tracker, res.weak_probs.mean(axis=0))

        for k in ("sup", "cons", "ccr"):
            acc_losses[k] += res.losses[k]
        acc_losses["total"] += res.total
        if res.mask is not None:
            acc_mask += float(res.mask.mean())
        acc_n += 1

        if t % cfg.eval_interval == 0 or t == cfg.t_total:
            tracker.snapshot(t)
            probs = softmax(forward(state.shadow_view(), split.x_test))
            ece_val, mce_val, _ = calibration(probs, split.y_test, cfg.bins)
            has_u = cfg.variant != "supervised"
            rec = {
                "step": t,
                "loss_total": acc_losses["total"] / acc_n,
                "loss_sup": acc_losses["sup"] / acc_n,
                "loss_cons": acc_losses["cons"] / acc_n,
                "loss_ccr": acc_losses["ccr"] / acc_n,
                "mask_rate": acc_mask / acc_n if has_u else float("nan"),
                "comp_mask_rate": 1.0 - acc_mask / acc_n if has_u else float("nan"),
                "alpha": alpha,
                "temperature": temperature,
                "kl_est_true": kl_divergence(tracker.estimate, true_q) if true_q is not None else float("nan"),
                "kl_est_uniform": kl_divergence(tracker.estimate, flexda.uniform_prior(K)),
                "balanced_accuracy": balanced_accuracy(probs.argmax(axis=1), split.y_test, K),
                "ece": ece_val,
                "mce": mce_val,
            }
            report.records.append(rec)
            if on_record:
                on_record(rec)
            acc_losses = dict.fromkeys(acc_losses, 0.0)
            acc_mask, acc_n = 0.0, 0
            report.final_test_probs = probs

    W = cfg.final_window
    report.summary = {
        "final_balanced_accuracy": report.final_window_mean("balanced_accuracy", W),
        "final_ece": report.records[-1]["ece"],
        "final_mce": report.records[-1]["mce"],
    }
    report.prior_snapshots = list(tracker.history)
    report.state = state
    return report


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["t_total"] = cfg.t_total
    return d
