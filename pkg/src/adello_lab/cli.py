"""Command-line front end.

    adello-lab run SPEC [--jobs N] [--seed-override 4,5] [--diagnostics]
    adello-lab summarize DIR
    adello-lab export-reliability RUN_ID --bins M [--dir DIR] [--out FILE]
    adello-lab rank SUMMARY_CSV

Exit codes: 0 success, 1 configuration error, 2 run failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .config import OUTPUT_ROOT_ENV, ConfigError, ExperimentSpec, parse_seed_list, parse_spec, resolve_output_dir
from .data import make_task, sample_split
from .evaluation import BIN_COLUMNS, bin_predictions, friedman_rank
from .trainer import RECORD_FIELDS, RunAborted, run

log = logging.getLogger("adello_lab")

EXIT_OK, EXIT_CONFIG, EXIT_RUN = 0, 1, 2

METRIC_COLUMNS = ("experiment", "setting", "variant", "seed", "step", "metric", "value")
TEST_COLUMNS = ("confidence", "prediction", "label")
SUMMARY_COLUMNS = (
    "setting",
    "variant",
    "n_seeds",
    "bacc_mean",
    "bacc_std",
    "ece_mean",
    "ece_std",
    "mce_mean",
    "mce_std",
    "friedman_mean_rank",
    "final_rank",
)
FINAL_METRICS = ("final_balanced_accuracy", "final_ece", "final_mce")


def run_id(setting: str, variant: str, seed: int) -> str:
    return f"{setting}__{variant}__s{seed}"


def _fmt(x) -> str:
    return repr(float(x))


def _execute_run(spec: ExperimentSpec, setting, variant: str, seed: int, diagnostics: bool) -> tuple[str, bool, str]:
    """Train one cell and write its metrics and test-prediction files; returns (run id, ok, message)."""
    rid = run_id(setting.name, variant, seed)
    runs_dir = spec.output_dir / "runs"
    task = make_task(spec.task.dim, spec.task.classes, spec.task.separation, spec.task.sigma, spec.task.seed)
    task = task.with_priors(setting.lt)
    # the split depends on the seed, not the variant, so variants are compared on identical data
    split = sample_split(task, setting.lt, spec.test_per_class, seed)
    cfg = spec.train_config(variant, seed, diagnostics)
    metrics_path = runs_dir / f"{rid}.metrics.csv"
    with metrics_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        prefix = [spec.name, setting.name, variant, seed]

        def emit(rec):
            for key in RECORD_FIELDS[1:]:
                w.writerow(prefix + [rec["step"], key, _fmt(rec[key])])
            fh.flush()

        try:
            report = run(cfg, split, task, on_record=emit)
        except RunAborted as exc:
            return rid, False, str(exc)
        last = report.records[-1]["step"]
        for key in FINAL_METRICS:
            w.writerow(prefix + [last, key, _fmt(report.summary[key])])

    probs = report.final_test_probs
    with (runs_dir / f"{rid}.test.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TEST_COLUMNS)
        for p, y in zip(probs, split.y_test):
            w.writerow([_fmt(p.max()), int(p.argmax()), int(y)])
    return rid, True, "ok"


def run_experiment(spec: ExperimentSpec, jobs: int = 1, diagnostics: bool = False) -> int:
    (spec.output_dir / "runs").mkdir(parents=True, exist_ok=True)
    cells = list(spec.runs())
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_execute_run, spec, s, v, seed, diagnostics) for s, v, seed in cells]
            results = [f.result() for f in futures]
    else:
        results = [_execute_run(spec, s, v, seed, diagnostics) for s, v, seed in cells]
    failed = [(rid, msg) for rid, ok, msg in results if not ok]
    for rid, msg in failed:
        log.error("%s: %s", rid, msg)
    if failed:
        return EXIT_RUN
    summarize(spec.output_dir)
    return EXIT_OK


def read_final_metrics(out_dir) -> dict[tuple[str, str, int], dict[str, float]]:
    finals: dict[tuple[str, str, int], dict[str, float]] = {}
    for path in sorted((Path(out_dir) / "runs").glob("*.metrics.csv")):
        with path.open(newline="") as fh:
            for row in csv.DictReader(fh):
                if row["metric"] in FINAL_METRICS:
                    key = (row["setting"], row["variant"], int(row["seed"]))
                    finals.setdefault(key, {})[row["metric"]] = float(row["value"])
    return finals


def _mean_std(vals):
    arr = np.asarray(vals, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0


def summarize(out_dir) -> Path:
    """Aggregate per-run final metrics into summary.csv (mean/std over seeds plus Friedman ranks)."""
    out_dir = Path(out_dir)
    finals = read_final_metrics(out_dir)
    if not finals:
        raise FileNotFoundError(f"no completed runs under {out_dir / 'runs'}")
    cells: dict[tuple[str, str], list[dict]] = defaultdict(list)
    settings: list[str] = []
    variants: list[str] = []
    for (setting, variant, _seed), vals in sorted(finals.items(), key=lambda kv: kv[0]):
        if len(vals) != len(FINAL_METRICS):
            continue
        cells[(setting, variant)].append(vals)
        if setting not in settings:
            settings.append(setting)
        if variant not in variants:
            variants.append(variant)

    table = np.full((len(variants), len(settings)), np.nan)
    rows = []
    for (setting, variant), runs in cells.items():
        bacc = _mean_std([r["final_balanced_accuracy"] for r in runs])
        ec = _mean_std([r["final_ece"] for r in runs])
        mc = _mean_std([r["final_mce"] for r in runs])
        table[variants.index(variant), settings.index(setting)] = bacc[0]
        rows.append([setting, variant, len(runs), *bacc, *ec, *mc])

    if len(variants) >= 2 and np.all(np.isfinite(table)):
        mean_rank, final = friedman_rank(table, higher_is_better=True)
    else:
        mean_rank = np.full(len(variants), np.nan)
        final = np.zeros(len(variants), dtype=int)
    path = out_dir / "summary.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            i = variants.index(row[1])
            w.writerow(row[:3] + [_fmt(v) for v in row[3:]] + [_fmt(mean_rank[i]), int(final[i])])
    return path


def read_summary_table(path) -> tuple[list[str], list[str], np.ndarray]:
    """(variants, settings, bacc_mean table) from a summary.csv."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    settings = list(dict.fromkeys(r["setting"] for r in rows))
    table = np.full((len(variants), len(settings)), np.nan)
    for r in rows:
        table[variants.index(r["variant"]), settings.index(r["setting"])] = float(r["bacc_mean"])
    return variants, settings, table


def find_run(run_name: str, search_dir) -> Path:
    hits = sorted(Path(search_dir).rglob(f"{run_name}.test.csv"))
    if not hits:
        raise FileNotFoundError(f"unknown run id {run_name!r} under {search_dir}")
    return hits[0]


def export_reliability(run_name: str, bins: int, search_dir=".") -> str:
    """Reliability bins of a finished run's final test predictions, as CSV text."""
    conf, correct = [], []
    with find_run(run_name, search_dir).open(newline="") as fh:
        for row in csv.DictReader(fh):
            conf.append(float(row["confidence"]))
            correct.append(row["prediction"] == row["label"])
    rb = bin_predictions(conf, correct, bins)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BIN_COLUMNS)
    for lo, hi, n, c, a in zip(rb.edges[:-1], rb.edges[1:], rb.counts, rb.conf, rb.acc):
        w.writerow([_fmt(lo), _fmt(hi), int(n), _fmt(c), _fmt(a)])
    return buf.getvalue()


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adello-lab", description="Long-tailed semi-supervised learning experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every (setting, variant, seed) cell of an experiment file")
    r.add_argument("spec")
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--seed-override", help="comma-separated seeds replacing the file's list")
    r.add_argument("--diagnostics", action="store_true", help="record KL traces against the hidden unlabeled prior")

    s = sub.add_parser("summarize", help="rebuild summary.csv from per-run metric files")
    s.add_argument("dir")

    e = sub.add_parser("export-reliability", help="reliability bins of a finished run")
    e.add_argument("run_id")
    e.add_argument("--bins", type=int, default=15)
    e.add_argument("--dir", default=None, help=f"where to look for runs (default: ${OUTPUT_ROOT_ENV} or .)")
    e.add_argument("--out", default=None)

    k = sub.add_parser("rank", help="Friedman ranks of the variants in a summary.csv")
    k.add_argument("summary")
    return p


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")

    if args.command == "run":
        try:
            spec = parse_spec(args.spec)
            if args.seed_override:
                spec.seeds = parse_seed_list("--seed-override", args.seed_override)
            if args.jobs < 1:
                raise ConfigError("--jobs must be >= 1")
        except ConfigError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        status = run_experiment(spec, jobs=args.jobs, diagnostics=args.diagnostics)
        if status == EXIT_OK:
            print(spec.output_dir / "summary.csv")
        return status

    if args.command == "summarize":
        try:
            print(summarize(args.dir))
        except FileNotFoundError as exc:
            print(exc, file=sys.stderr)
            return EXIT_RUN
        return EXIT_OK

    if args.command == "export-reliability":
        if args.bins < 1:
            print("config error: --bins must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
        search = args.dir if args.dir is not None else resolve_output_dir(".")
        try:
            text = export_reliability(args.run_id, args.bins, search)
        except FileNotFoundError as exc:
            print(exc, file=sys.stderr)
            return EXIT_RUN
        if args.out:
            Path(args.out).write_text(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK

    if args.command == "rank":
        variants, settings, table = read_summary_table(args.summary)
        if not np.all(np.isfinite(table)):
            print("summary table has missing cells", file=sys.stderr)
            return EXIT_CONFIG
        mean_rank, final = friedman_rank(table)
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["variant", "friedman_mean_rank", "final_rank"])
        for v, m, f in zip(variants, mean_rank, final):
            w.writerow([v, _fmt(m), int(f)])
        return EXIT_OK
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
