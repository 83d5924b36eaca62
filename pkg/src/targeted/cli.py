"""Command-line interface.

    targeted score      similarity and drawing probability of every row
    targeted resample   write a similarity-weighted resampled copy of a CSV
    targeted train      train the configured methods on a single split
    targeted experiment full standard-vs-targeted comparison from a manifest
    targeted t-study    resampling-scheme runs for several values of t
    targeted group-study  runs for several target-group sizes
    targeted synth      write a synthetic clustered dataset as CSV

Diagnostics go to stderr; data only ever goes to files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    CsvSchema,
    DataError,
    Dataset,
    apply_standardization,
    fit_standardization,
    generate_synthetic_clustered,
    load_csv,
    write_csv,
)
from .experiment import (
    ConfigError,
    ExperimentConfig,
    TrainingDiverged,
    load_dataset,
    load_manifest,
    parse_manifest,
    prepare_split,
    resolve_group_size,
    run_experiment,
    run_group_study,
    run_t_sensitivity,
    split_seed,
    build_network,
    summary_dict,
    target_metric_name,
    train_method,
    write_metrics_csv,
    write_summary_json,
)
from .io import atomic_write
from .nn import evaluate, save_checkpoint
from .sampling import RESAMPLE, WEIGHTED_BATCH, ZeroMassError, build_alias_table, build_plan, resample_size
from .similarity import MEASURES, SimilarityMeasure, score_dataset
from .streams import make_rng

log = logging.getLogger("targeted")

# CLI flag -> manifest key
OVERRIDE_FLAGS = {
    "seed": "seed",
    "t": "t",
    "g": "g",
    "epochs": "epochs",
    "batch_size": "batchSize",
    "lr": "learningRate",
    "method": "method",
    "splits": "splits",
    "workers": "workers",
}


def _error(kind: str, message: str, field=None, code: int = 2) -> int:
    record = {"error": kind, "message": message}
    if field is not None:
        record["field"] = field
    print(json.dumps(record), file=sys.stderr)
    return code


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _add_table_args(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="input CSV (features and one label column)")
    p.add_argument("--label-column", type=int, default=-1,
                   help="index of the label column, negative counts from the end (default: -1)")
    p.add_argument("--classes", type=int, default=None,
                   help="number of classes; omit for regression labels")
    p.add_argument("--header", choices=("auto", "yes", "no"), default="auto",
                   help="whether the first row is a header (default: auto-detect)")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--targets", help="CSV of target feature vectors, one per row, no label")
    group.add_argument("--target-rows", help="comma-separated row indices of --data to use as targets")
    p.add_argument("--standardize", choices=("none", "columnwise", "overall"), default="none",
                   help="standardize features (fitted on --data) before scoring (default: none)")
    p.add_argument("--similarity", choices=MEASURES, default=MEASURES[0],
                   help="similarity measure (default: cosine-max)")
    p.add_argument("--out", required=True, help="output CSV path")


def _add_manifest_args(p: argparse.ArgumentParser, out_help: str):
    p.add_argument("--manifest", required=True, help="experiment manifest (INI; see README)")
    p.add_argument("--seed", type=int, help="master seed (manifest: seed)")
    p.add_argument("--t", type=float, help="resampling scale t (manifest: t)")
    p.add_argument("--g", help="target-group size: count, fraction, or n/k (manifest: g)")
    p.add_argument("--epochs", type=int, help="training epochs (manifest: epochs)")
    p.add_argument("--batch-size", type=int, help="mini-batch size (manifest: batchSize)")
    p.add_argument("--lr", type=float, help="constant SGD learning rate (manifest: learningRate)")
    p.add_argument("--method", help="standard|targeted-batch|targeted-resample, comma-separated "
                                    "for several (manifest: method)")
    p.add_argument("--splits", type=int, help="number of random splits (manifest: splits)")
    p.add_argument("--workers", type=int, help="parallel worker processes (manifest: workers)")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("--no-figures", action="store_true", help="skip rendering PNG figures")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="targeted", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("score", help="write per-row similarity and drawing probability")
    _add_table_args(p)

    p = sub.add_parser("resample", help="write a similarity-weighted resampled copy of a CSV")
    _add_table_args(p)
    p.add_argument("--t", type=float, default=10.0, help="output has floor(t*n) rows (default: 10)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")

    p = sub.add_parser("train", help="train the manifest's methods on one split")
    _add_manifest_args(p, "output directory")
    p.add_argument("--split", type=int, default=0, help="split index (default: 0)")
    p.add_argument("--checkpoint", action="store_true",
                   help="also save each method's final network as <method>.ckpt")

    p = sub.add_parser("experiment", help="run the full comparison described by a manifest")
    _add_manifest_args(p, "output directory for metrics.csv, summary.json and figures")

    p = sub.add_parser("t-study", help="resampling runs for several t values")
    _add_manifest_args(p, "output directory")
    p.add_argument("--t-values", default="5,20", help="comma-separated t values (default: 5,20)")

    p = sub.add_parser("group-study", help="runs for several target-group sizes")
    _add_manifest_args(p, "output directory")
    p.add_argument("--g-values", default="n/2,n/4",
                   help="comma-separated group sizes: counts, fractions or n/k (default: n/2,n/4)")

    p = sub.add_parser("synth", help="write a synthetic clustered dataset as CSV")
    p.add_argument("--n-per-cluster", type=int, default=200, help="rows per cluster (default: 200)")
    p.add_argument("--p", type=int, default=5, help="feature dimension (default: 5)")
    p.add_argument("--clusters", type=int, default=2, help="number of clusters (default: 2)")
    p.add_argument("--classes", type=int, default=None, help="class count; omit for regression")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    p.add_argument("--out", required=True, help="output CSV path")
    return parser


# --------------------------------------------------------------------------
# score / resample
# --------------------------------------------------------------------------

def _load_table(args):
    header = {"auto": None, "yes": True, "no": False}[args.header]
    schema = CsvSchema(label_column=args.label_column, n_classes=args.classes, header=header)
    data = load_csv(args.data, schema)
    if args.target_rows is not None:
        try:
            rows = [int(r) for r in args.target_rows.split(",") if r.strip()]
        except ValueError:
            raise DataError(f"--target-rows: not a list of integers: {args.target_rows!r}") from None
        if not rows or any(not 0 <= r < data.n for r in rows):
            raise DataError(f"--target-rows must name rows in 0..{data.n - 1}")
        targets = data.features[rows]
    else:
        targets = _load_target_file(args.targets, data.p)
    if args.standardize != "none":
        stats = fit_standardization(data, args.standardize)
        data_std = apply_standardization(data, stats)
        targets = (targets - stats.means) / np.maximum(stats.std_devs, stats.epsilon)
    else:
        data_std = data
    return data, data_std, targets, header


def _load_target_file(path, p):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for line, row in enumerate(csv.reader(fh), start=1):
            if not any(c.strip() for c in row):
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                if line == 1 and not rows:
                    continue  # header
                raise DataError(f"{path}:{line}: unparseable target row") from None
            if len(values) != p:
                raise DataError(f"{path}:{line}: expected {p} values, found {len(values)}")
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no target rows")
    return np.array(rows)


def cmd_score(args) -> int:
    _, data, targets, _ = _load_table(args)
    scores = score_dataset(data, targets, SimilarityMeasure(args.similarity))
    plan = build_plan(scores, WEIGHTED_BATCH, fallback="uniform")
    if plan.used_fallback:
        print("warning: every similarity is zero; probabilities fall back to uniform", file=sys.stderr)
    with atomic_write(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rowIndex", "similarity", "probability"])
        for i, (s, q) in enumerate(zip(scores.scores, plan.probabilities)):
            writer.writerow([i, repr(float(s)), repr(float(q))])
    log.info("scored %d rows against %d targets -> %s", data.n, len(targets), args.out)
    return 0


def cmd_resample(args) -> int:
    if not args.t > 0:
        return _error("invalid-argument", "--t must be positive", field="t")
    raw, data, targets, header = _load_table(args)
    if resample_size(raw.n, args.t) < 1:
        return _error("invalid-argument", f"floor(t*n) is zero for t={args.t}, n={raw.n}", field="t")
    scores = score_dataset(data, targets, SimilarityMeasure(args.similarity))
    plan = build_plan(scores, RESAMPLE, fallback="uniform", t=args.t)
    if plan.used_fallback:
        print("warning: every similarity is zero; resampling uniformly", file=sys.stderr)
    rng = make_rng(args.seed)
    idx = build_alias_table(plan).sample(resample_size(raw.n, args.t), rng)

    # copy the original text rows so the output keeps the input schema verbatim
    with open(args.data, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    has_header = len(rows) == raw.n + 1
    body = rows[1:] if has_header else rows
    with atomic_write(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        if has_header:
            writer.writerow(rows[0])
        for i in idx:
            writer.writerow(body[i])
    log.info("wrote %d resampled rows -> %s", len(idx), args.out)
    return 0


# --------------------------------------------------------------------------
# manifest-driven verbs
# --------------------------------------------------------------------------

def _config_from_args(args) -> tuple[ExperimentConfig, Path]:
    overrides = {OVERRIDE_FLAGS[k]: getattr(args, k) for k in OVERRIDE_FLAGS if getattr(args, k, None) is not None}
    config = load_manifest(args.manifest, overrides)
    return config, Path(args.manifest).resolve().parent


def _write_experiment(out: Path, result, figures: bool, stem: str = "metrics") -> None:
    write_metrics_csv(out / f"{stem}.csv", [result])
    write_summary_json(out / "summary.json", summary_dict(result))
    if figures:
        from .plotting import plot_experiment

        plot_experiment(result, out / "curves.png", title=f"{result.config.dataset.name or result.config.dataset.kind}, g = {result.g}")


def cmd_experiment(args) -> int:
    config, base = _config_from_args(args)
    data = load_dataset(config.dataset, base)
    result = run_experiment(config, data)
    out = Path(args.out)
    _write_experiment(out, result, not args.no_figures)
    log.info("wrote %s", out)
    return 0


def cmd_train(args) -> int:
    config, base = _config_from_args(args)
    data = load_dataset(config.dataset, base)
    g = resolve_group_size(config.g, data.n)
    epochs = config.resolved_epochs(data)
    part_seq, init_seq, train_seq = split_seed(config.seed, args.split).spawn(3)
    train, targets = prepare_split(config, data, g, make_rng(part_seq))
    net0 = build_network(config, data, make_rng(init_seq))
    metric = target_metric_name(data)
    out = Path(args.out)
    with atomic_write(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "split", "epoch", "trainingLoss", "targetMetric", "wallClockSeconds"])
        for method in config.methods:
            net, losses, metrics, clock = train_method(
                method, config, train, targets.targets, net0, epochs, make_rng(train_seq),
                lambda n: evaluate(n, targets.targets, np.asarray(targets.held_out_labels), metric))
            for e in range(epochs):
                writer.writerow([method, args.split, e + 1, repr(float(losses[e])), repr(float(metrics[e])),
                                 f"{clock[e]:.6f}"])
            if args.checkpoint:
                save_checkpoint(out / f"{method}.ckpt", net)
            print(f"{method}: final training loss {losses[-1]:.6g}, target {metric} {metrics[-1]:.6g}",
                  file=sys.stderr)
    return 0


def _parse_values(text: str, kind):
    try:
        return [kind(v.strip()) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError("values", f"cannot parse {text!r}") from None


def cmd_t_study(args) -> int:
    config, base = _config_from_args(args)
    if "targeted-resample" not in config.methods:
        config = dataclasses.replace(config, methods=("targeted-resample",))
    t_values = _parse_values(args.t_values, float)
    if not t_values or any(not t > 0 for t in t_values):
        raise ConfigError("t", "t values must be positive")
    data = load_dataset(config.dataset, base)
    results = run_t_sensitivity(config, t_values, data)
    out = Path(args.out)
    write_metrics_csv(out / "metrics.csv", list(results.values()), extra={"t": list(results)})
    write_summary_json(out / "summary.json",
                       {"study": "t", "runs": [dict(summary_dict(r), t=t) for t, r in results.items()]})
    if not args.no_figures:
        from .plotting import plot_study

        plot_study(results, out / "curves.png", label_fmt="t = {:g}")
    return 0


def cmd_group_study(args) -> int:
    config, base = _config_from_args(args)
    data = load_dataset(config.dataset, base)
    g_values = _parse_values(args.g_values, str)
    results = run_group_study(config, g_values, data)
    out = Path(args.out)
    n_train = [r.traces[0].n_train for r in results.values()]
    write_metrics_csv(out / "metrics.csv", list(results.values()),
                      extra={"g": list(results), "nTrain": n_train})
    write_summary_json(out / "summary.json",
                       {"study": "g", "runs": [summary_dict(r) for r in results.values()]})
    for g, r in results.items():
        print(f"g = {g}: {r.traces[0].n_train} training rows", file=sys.stderr)
    if not args.no_figures:
        from .plotting import plot_study

        plot_study(results, out / "curves.png", label_fmt="g = {}")
    return 0


def cmd_synth(args) -> int:
    data = generate_synthetic_clustered(args.n_per_cluster, args.p, args.clusters, args.seed,
                                        n_classes=args.classes)
    write_csv(args.out, data)
    return 0


COMMANDS = {
    "score": cmd_score,
    "resample": cmd_resample,
    "train": cmd_train,
    "experiment": cmd_experiment,
    "t-study": cmd_t_study,
    "group-study": cmd_group_study,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        return _error("invalid-config", str(exc), field=exc.field)
    except (DataError, ZeroMassError) as exc:
        return _error("invalid-data", str(exc))
    except TrainingDiverged as exc:
        return _error("diverged", str(exc), code=3)
    except OSError as exc:
        return _error("io", str(exc))


if __name__ == "__main__":
    sys.exit(main())
