"""Experiment files: an INI-style grammar with one section per concern.

::

    [experiment]
    name = forward_lt          ; required
    variants = fixmatch, adello
    seeds = 1, 2, 3
    output_dir = out/forward   ; relative paths resolve against $ADELLO_OUTPUT_ROOT
    test_per_class = 400

    [task]
    dim = 2
    classes = 5
    separation = 2.0
    sigma = 1.0
    seed = 0

    [setting forward]          ; one section per long-tail setting, in file order
    gamma_l = 50
    gamma_u = 50
    n1 = 60
    m1 = 600
    ood_fraction = 0

    [train]                    ; any TrainConfig override
    steps = 20000
    warmup = auto              ; auto = 20% of steps

    [augment]
    weak_sigma = 0.1

Keys are case-insensitive; ``;`` and ``#`` start comments. Every key has a
default, so only ``[experiment] name`` and at least one ``[setting ...]`` are
mandatory.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentConfig, LongTailSpec
from .flexda import DebiasSchedule
from .math_core import OptimizerConfig
from .trainer import VARIANTS, TrainConfig

OUTPUT_ROOT_ENV = "ADELLO_OUTPUT_ROOT"
WARMUP_FRACTION = 0.2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    dim: int = 2
    classes: int = 5
    separation: float = 2.0
    sigma: float = 1.0
    seed: int = 0


@dataclass(frozen=True)
class Setting:
    name: str
    lt: LongTailSpec


@dataclass
class ExperimentSpec:
    name: str
    task: TaskSpec
    settings: list[Setting]
    variants: list[str]
    seeds: list[int]
    output_dir: Path
    test_per_class: int = 400
    train: dict = field(default_factory=dict)
    augment: dict = field(default_factory=dict)

    def runs(self):
        """(setting, variant, seed) triples in a fixed order."""
        for s in self.settings:
            for v in self.variants:
                for seed in self.seeds:
                    yield s, v, seed

    def train_config(self, variant: str, seed: int, diagnostics: bool = False) -> TrainConfig:
        return build_train_config(self.train, self.augment, variant, seed, diagnostics)


def _num(kind, lo=None, hi=None, lo_open=False, hi_open=False):
    def conv(key, raw):
        try:
            val = kind(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None
        bad = (
            (lo is not None and (val <= lo if lo_open else val < lo))
            or (hi is not None and (val >= hi if hi_open else val > hi))
        )
        if bad:
            left = "(" if lo_open else "["
            right = ")" if hi_open else "]"
            raise ConfigError(f"{key}={val} out of range {left}{lo if lo is not None else '-inf'}, {hi if hi is not None else 'inf'}{right}")
        return val

    return conv


def _choice(options):
    def conv(key, raw):
        if raw not in options:
            raise ConfigError(f"{key}={raw!r} must be one of {', '.join(options)}")
        return raw

    return conv


def _warmup(key, raw):
    return "auto" if raw == "auto" else _num(int, 0)(key, raw)


TASK_KEYS = {
    "dim": _num(int, 2),
    "classes": _num(int, 2),
    "separation": _num(float, 0, lo_open=True),
    "sigma": _num(float, 0, lo_open=True),
    "seed": _num(int, 0),
}
SETTING_KEYS = {
    "gamma_l": _num(float, 0, lo_open=True),
    "gamma_u": _num(float, 0, lo_open=True),
    "n1": _num(int, 1),
    "m1": _num(int, 1),
    "ood_fraction": _num(float, 0, 1, hi_open=True),
}
SETTING_DEFAULTS = {"gamma_l": 50.0, "gamma_u": 50.0, "n1": 60, "m1": 600, "ood_fraction": 0.0}
# Learning-rate, momentum, decay and EMA defaults follow common FixMatch practice.
TRAIN_DEFAULTS = {
    "batch_size": 64,
    "mu": 2,
    "tau": 0.95,
    "steps": 20_000,
    "warmup": "auto",
    "d": 2.0,
    "alpha_min": 0.1,
    "lambda_u": 1.0,
    "lambda_uc": 1.0,
    "lr": 0.03,
    "momentum": 0.9,
    "weight_decay": 5e-4,
    "ema_decay": 0.999,
    "prior_beta": 0.999,
    "hidden": 32,
    "activation": "tanh",
    "eval_interval": 500,
    "final_window": 10,
    "bins": 15,
}
TRAIN_KEYS = {
    "batch_size": _num(int, 1),
    "mu": _num(int, 1),
    "tau": _num(float, 0, 1, lo_open=True, hi_open=True),
    "steps": _num(int, 1),
    "warmup": _warmup,
    "d": _num(float, 0),
    "alpha_min": _num(float, 0, 1),
    "lambda_u": _num(float, 0),
    "lambda_uc": _num(float, 0),
    "lr": _num(float, 0, lo_open=True),
    "momentum": _num(float, 0, 1, hi_open=True),
    "weight_decay": _num(float, 0),
    "ema_decay": _num(float, 0, 1, hi_open=True),
    "prior_beta": _num(float, 0, 1, hi_open=True),
    "hidden": _num(int, 1),
    "activation": _choice(("tanh", "softplus")),
    "eval_interval": _num(int, 1),
    "final_window": _num(int, 1),
    "bins": _num(int, 1),
}
AUGMENT_DEFAULTS = {"weak_sigma": 0.1, "strong_sigma": 0.5, "strong_dropout": 0.1}
AUGMENT_KEYS = {
    "weak_sigma": _num(float, 0),
    "strong_sigma": _num(float, 0),
    "strong_dropout": _num(float, 0, 1),
}
EXPERIMENT_KEYS = {"name", "variants", "seeds", "output_dir", "test_per_class"}


def _section(parser, name, schema, defaults):
    out = dict(defaults)
    if not parser.has_section(name):
        return out
    for key, raw in parser.items(name):
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in [{name}]")
        out[key] = schema[key](f"{name}.{key}", raw.strip())
    return out


def parse_seed_list(key, raw) -> list[int]:
    try:
        vals = [int(tok) for tok in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key}: expected a list of integers, got {raw!r}") from None
    if not vals:
        raise ConfigError(f"{key}: empty list")
    dup = sorted({v for v in vals if vals.count(v) > 1})
    if dup:
        raise ConfigError(f"{key}: duplicate seed(s) {dup}")
    return vals


def resolve_output_dir(raw: str) -> Path:
    p = Path(raw)
    if p.is_absolute():
        return p
    return Path(os.environ.get(OUTPUT_ROOT_ENV, ".")) / p


def parse_spec_text(text: str) -> ExperimentSpec:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed experiment file: {exc}") from None

    known = {"experiment", "task", "train", "augment"}
    for sec in parser.sections():
        if sec not in known and not sec.startswith("setting "):
            raise ConfigError(f"unknown section [{sec}]")

    if not parser.has_section("experiment"):
        raise ConfigError("missing [experiment] section")
    exp = dict(parser.items("experiment"))
    for key in exp:
        if key not in EXPERIMENT_KEYS:
            raise ConfigError(f"unknown key {key!r} in [experiment]")
    if not exp.get("name"):
        raise ConfigError("experiment.name is required")

    variants = [v.strip() for v in exp.get("variants", "fixmatch, adello").replace(",", " ").split()]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"experiment.variants: unknown variant {v!r}; expected one of {', '.join(VARIANTS)}")
    if len(set(variants)) != len(variants):
        raise ConfigError("experiment.variants: duplicate variant")
    seeds = parse_seed_list("experiment.seeds", exp.get("seeds", "1, 2, 3"))
    test_per_class = _num(int, 1)("experiment.test_per_class", exp.get("test_per_class", "400"))

    task = TaskSpec(**_section(parser, "task", TASK_KEYS, TaskSpec().__dict__))

    settings = []
    for sec in parser.sections():
        if not sec.startswith("setting "):
            continue
        name = sec[len("setting ") :].strip()
        vals = _section(parser, sec, {k: v for k, v in SETTING_KEYS.items()}, SETTING_DEFAULTS)
        lt = LongTailSpec(
            K=task.classes,
            N1=vals["n1"],
            gamma_l=vals["gamma_l"],
            gamma_u=vals["gamma_u"],
            M1=vals["m1"],
            ood_fraction=vals["ood_fraction"],
        )
        settings.append(Setting(name, lt))
    if not settings:
        raise ConfigError("at least one [setting <name>] section is required")

    train = _section(parser, "train", TRAIN_KEYS, TRAIN_DEFAULTS)
    augment = _section(parser, "augment", AUGMENT_KEYS, AUGMENT_DEFAULTS)
    spec = ExperimentSpec(
        name=exp["name"],
        task=task,
        settings=settings,
        variants=variants,
        seeds=seeds,
        output_dir=resolve_output_dir(exp.get("output_dir", exp["name"])),
        test_per_class=test_per_class,
        train=train,
        augment=augment,
    )
    # surface cross-field errors (warmup > steps, weak > strong noise) at parse time
    try:
        spec.train_config(variants[0], seeds[0])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return spec


def parse_spec(path) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"experiment file not found: {path}")
    return parse_spec_text(path.read_text())


def build_train_config(train: dict, augment: dict, variant: str, seed: int, diagnostics: bool = False) -> TrainConfig:
    t = {**TRAIN_DEFAULTS, **train}
    a = {**AUGMENT_DEFAULTS, **augment}
    steps = t["steps"]
    warmup = int(WARMUP_FRACTION * steps) if t["warmup"] == "auto" else t["warmup"]
    return TrainConfig(
        variant=variant,
        batch_size=t["batch_size"],
        mu=t["mu"],
        tau=t["tau"],
        schedule=DebiasSchedule(d=t["d"], alpha_min=t["alpha_min"], t_total=steps),
        t_warmup=warmup,
        lambda_u=t["lambda_u"],
        lambda_uc=t["lambda_uc"],
        optimizer=OptimizerConfig(
            lr=t["lr"], momentum=t["momentum"], weight_decay=t["weight_decay"], ema_decay=t["ema_decay"]
        ),
        augment=AugmentConfig(a["weak_sigma"], a["strong_sigma"], a["strong_dropout"]),
        prior_beta=t["prior_beta"],
        hidden=t["hidden"],
        activation=t["activation"],
        eval_interval=t["eval_interval"],
        final_window=t["final_window"],
        bins=t["bins"],
        seed=seed,
        diagnostics=diagnostics,
    )
