"""Command-line entry point: gen, extract, label, preprocess, train, evaluate,
predict and baseline subcommands.

Every subcommand accepts ``--config FILE`` (``key = value`` lines using the
long option names) and ``--threads N``.  Explicit flags override the config
file, which overrides built-in defaults.

Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import capture, labeling, metrics, neuralnet as nn, pipeline, plotting, svm, trafficgen
from .store import ArchMismatch, ChecksumMismatch

log = logging.getLogger("pktids")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODES = ("multiclass", "binary")
ATTACK_SUBCATEGORIES = tuple(s for s in labeling.SUBCATEGORIES if s != "normal")


class UsageError(Exception):
    pass


# ------------------------------------------------------------ config

def read_config(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; dashes and underscores are equivalent."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions}
    defaults = {}
    for key, raw in values.items():
        action = actions.get(key)
        if action is None or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r} for {parser.prog}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            defaults[key] = raw.lower() in ("1", "true", "yes", "on")
        elif action.nargs in ("*", "+") or isinstance(action, argparse._AppendAction):
            conv = action.type or str
            defaults[key] = [conv(v) for v in raw.split()]
        else:
            defaults[key] = (action.type or str)(raw)
        action.required = False
    parser.set_defaults(**defaults)


@dataclass
class RunConfig:
    """Resolved options shared by the model subcommands."""
    data: Path
    seed: int
    mode: str = "multiclass"
    subcategory: Optional[str] = None
    weights: Optional[Path] = None
    transfer: Optional[Path] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"unknown mode {self.mode!r}")
        if self.mode == "binary" and self.subcategory is None:
            raise UsageError("binary mode needs --subcategory")
        if self.mode == "multiclass" and self.subcategory is not None:
            raise UsageError("--subcategory only applies to binary mode")


# ------------------------------------------------------------ shared helpers

def _ensure_parent(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _load_prepared(data_dir):
    d = Path(data_dir)
    ds = pipeline.load_dataset(d)
    splits = pipeline.load_splits(d / "splits.json")
    return ds, splits


def _binary_view(ds, splits, subcategory: str, need=("train", "validation", "test")):
    """Normal rows plus one attack subcategory; splits restricted accordingly."""
    if subcategory not in ATTACK_SUBCATEGORIES:
        raise UsageError(f"unknown attack subcategory {subcategory!r}")
    code = pipeline.SUBCATEGORY_CODE[subcategory]
    mask = (ds.labels_subcategory == 0) | (ds.labels_subcategory == code)
    view = splits.restrict(mask)
    for part in need:
        idx = getattr(view, part)
        if not np.any(ds.labels_subcategory[idx] == code):
            raise labeling.EmptyClass(f"no {subcategory} rows in the {part} split")
    return view


def _select(splits, name: str, n: int) -> np.ndarray:
    if name == "all":
        return np.sort(np.concatenate([splits.train, splits.validation, splits.test]))
    return getattr(splits, name)


def _write_confusion_csv(cm, names, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["actual"] + list(names))
        for name, row in zip(names, cm):
            w.writerow([name] + [int(v) for v in row])


# ------------------------------------------------------------ subcommands

def cmd_gen(args) -> int:
    budgets = dict(trafficgen.DEFAULT_BUDGETS)
    for item in args.budget or []:
        sub, _, n = item.partition("=")
        if sub not in budgets or not n.isdigit():
            raise UsageError(f"bad --budget {item!r}; expected subcategory=count")
        budgets[sub] = int(n)
    spec = trafficgen.ScenarioSpec(seed=args.seed, budgets=budgets)
    out = trafficgen.generate(spec, args.out)
    log.info("wrote %s (%d IP packets), %s, %s", out.capture, len(out.labels), out.rules, out.manifest)
    for sub, n in out.counts.items():
        print(f"{sub},{n}")
    return EXIT_OK


def cmd_extract(args) -> int:
    opts = capture.CaptureOptions(decode_http=not args.no_http, limit=args.limit)
    records, stats = capture.read_capture(args.capture, opts)
    out = _ensure_parent(args.out)
    capture.export_records(records, out)
    log.info("%s: %d frames, %d IP packets, %d non-IP, %d skipped", args.capture,
             stats.frames, stats.ip_packets, stats.non_ip, stats.skipped_ip)
    print(f"records,{len(records)}")
    print(f"skipped_ip,{stats.skipped_ip}")
    return EXIT_OK


def cmd_label(args) -> int:
    records = capture.import_records(args.records)
    rules = labeling.read_rules(args.rules)
    table = labeling.label_records(records, rules)
    if args.cap:
        table = labeling.subsample_stratified(table, args.cap, args.normal_fraction, args.seed)
    labeling.write_labeled(table, _ensure_parent(args.out))
    for sub, n in table["label_subcategory"].value_counts().reindex(labeling.SUBCATEGORIES).items():
        print(f"{sub},{0 if np.isnan(n) else int(n)}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    raw = labeling.read_labeled(args.labeled)
    prepared = pipeline.prepare(raw, seed=args.seed)
    out = pipeline.save_dataset(prepared.dataset, args.out)
    pipeline.save_splits(prepared.splits, out / "splits.json")
    (out / "class_weights.json").write_text(json.dumps(prepared.weights.to_dict()) + "\n")
    pipeline.write_intermediate(prepared.table, out / "intermediate.csv")
    stats = pipeline.dedup_stats(raw, prepared.table)
    stats.to_csv(out / "dedup.csv", index_label="subcategory")
    print(stats.to_csv(index_label="subcategory"), end="")
    log.info("dense width %d, splits %d/%d/%d", prepared.dataset.dense.shape[1],
             len(prepared.splits.train), len(prepared.splits.validation), len(prepared.splits.test))
    return EXIT_OK


def _train_config(args) -> nn.TrainConfig:
    try:
        return nn.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                              max_epochs=args.epochs,
                              patience=args.patience, seed=args.seed, l1=args.l1, l2=args.l2,
                              dropout=args.dropout)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    rc = RunConfig(Path(args.data), args.seed, args.mode, args.subcategory,
                   transfer=Path(args.transfer) if args.transfer else None)
    ds, splits = _load_prepared(rc.data)
    width = ds.dense.shape[1]
    if rc.mode == "multiclass":
        if rc.transfer is not None:
            raise UsageError("--transfer only applies to binary mode")
        w = nn.init_weights(width, len(pipeline.CLASS_NAMES), seed=rc.seed)
        labels = ds.labels_multiclass
        cw = pipeline.class_weights(labels[splits.train], n_classes=len(pipeline.CLASS_NAMES))
    else:
        if rc.transfer is None:
            raise UsageError("binary mode needs --transfer <multi-class weights>")
        mfnn = nn.load_weights(rc.transfer, n_classes=len(pipeline.CLASS_NAMES), dense_width=width)
        w = nn.build_bfnn(mfnn, seed=rc.seed, freeze=not args.unfreeze)
        splits = _binary_view(ds, splits, rc.subcategory, need=("train",))
        labels = ds.labels_binary
        cw = pipeline.class_weights(labels[splits.train], n_classes=2)
    best, report = nn.fit(w, ds, splits, cw, _train_config(args), labels=labels)
    out = _ensure_parent(args.out)
    nn.save_weights(best, out)
    stem = out.with_suffix("")
    with open(f"{stem}_history.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"])
        for row in report.rows():
            wr.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
    plotting.plot_training(report, f"{stem}_curves.png",
                           title=f"{rc.mode} training" + (f" ({rc.subcategory})" if rc.subcategory else ""))
    log.info("trained %d epochs (best %d) in %.1fs", report.stopped_epoch, report.best_epoch,
             report.wall_time)
    print(f"epochs,{report.stopped_epoch}")
    print(f"best_epoch,{report.best_epoch}")
    return EXIT_OK


def _model_inputs(args, need_part: str):
    rc = RunConfig(Path(args.data), 0, args.mode, args.subcategory, weights=Path(args.weights))
    ds, splits = _load_prepared(rc.data)
    width = ds.dense.shape[1]
    if rc.mode == "binary":
        splits = _binary_view(ds, splits, rc.subcategory, need=() if need_part == "all" else (need_part,))
        w = nn.load_weights(rc.weights, n_classes=2, dense_width=width)
        labels, names = ds.labels_binary, ("normal", rc.subcategory)
    else:
        w = nn.load_weights(rc.weights, n_classes=len(pipeline.CLASS_NAMES), dense_width=width)
        labels, names = ds.labels_multiclass, pipeline.CLASS_NAMES
    idx = _select(splits, args.split, len(ds))
    return rc, ds, w, labels, names, idx


def cmd_evaluate(args) -> int:
    rc, ds, w, labels, names, idx = _model_inputs(args, args.split)
    if rc.mode == "binary":
        code = pipeline.SUBCATEGORY_CODE[rc.subcategory]
        if not np.any(ds.labels_subcategory[idx] == code):
            raise labeling.EmptyClass(f"no {rc.subcategory} rows to evaluate")
    pred = nn.predict(w, *ds.inputs(idx))
    report = metrics.evaluate(labels[idx], pred, names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "report.json")
    _write_confusion_csv(report.confusion, names, out / "confusion.csv")
    plotting.plot_confusion(report.confusion, names, out / "confusion.png",
                            title=f"{rc.mode} ({args.split} split)")
    print(report.render())
    return EXIT_OK


def cmd_predict(args) -> int:
    rc, ds, w, labels, names, idx = _model_inputs(args, "all")
    probs = nn.predict_proba(w, *ds.inputs(idx))
    pred = probs.argmax(axis=1)
    with open(_ensure_parent(args.out), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["row", "predicted", "class"] + [f"p_{n}" for n in names])
        for r, p, pr in zip(idx, pred, probs):
            wr.writerow([int(r), int(p), names[p]] + [repr(float(v)) for v in pr])
    print(f"rows,{len(idx)}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    table = pipeline.read_intermediate(Path(args.data) / "intermediate.csv")
    result = svm.run_baseline(table, args.sample_size, seed=args.seed, C_grid=args.C,
                              folds=args.folds, max_iter=args.max_iter, solver=args.solver)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = metrics.evaluate(result.test_actual, result.test_predicted, pipeline.CLASS_NAMES)
    payload = report.to_dict()
    payload["baseline"] = {
        "sample_size": result.sample_size, "class_sizes": result.class_sizes,
        "best_C": result.grid.best_C, "converged": result.model.converged,
        "iterations": result.model.iterations, "runtime_seconds": result.runtime_seconds,
        "mean_cv_accuracy": {repr(c): a for c, a in result.grid.mean_accuracy.items()},
    }
    (out / "report.json").write_text(json.dumps(payload, indent=1) + "\n")
    with open(out / "grid.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["C", "mean_accuracy"] + [f"fold{i}" for i in range(args.folds)])
        for c in sorted(result.grid.mean_accuracy):
            wr.writerow([c, result.grid.mean_accuracy[c]] + result.grid.fold_accuracy[c])
    _write_confusion_csv(report.confusion, pipeline.CLASS_NAMES, out / "confusion.csv")
    plotting.plot_grid(result.grid.mean_accuracy, out / "grid.png", best_C=result.grid.best_C)
    plotting.plot_confusion(report.confusion, pipeline.CLASS_NAMES, out / "confusion.png",
                            title="linear SVC (test split)")
    svm.save_svm(result.model, out / "svc.bin")
    print(report.render())
    print(f"best_C,{result.grid.best_C:g}")
    print(f"runtime_seconds,{result.runtime_seconds:.3f}")
    return EXIT_OK


# ------------------------------------------------------------ parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file with option defaults")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread limit (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")


def _model_opts(p, split: str = "test") -> None:
    p.add_argument("--data", required=True, help="dataset directory written by preprocess")
    p.add_argument("--weights", required=True)
    p.add_argument("--mode", choices=MODES, default="multiclass")
    p.add_argument("--subcategory", choices=ATTACK_SUBCATEGORIES)
    p.add_argument("--split", choices=("test", "validation", "train", "all"), default=split)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pktids", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic labelled capture")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--budget", action="append", metavar="SUB=N",
                   help="packet budget override for one subcategory (repeatable)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("extract", help="capture file -> per-packet field CSV")
    p.add_argument("capture")
    p.add_argument("--out", required=True)
    p.add_argument("--no-http", action="store_true", help="skip HTTP request/status decoding")
    p.add_argument("--limit", type=int, help="stop after this many frames")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("label", help="attach labels from an attacker rules file")
    p.add_argument("records", help="CSV written by extract")
    p.add_argument("--rules", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cap", type=int, help="per-subcategory row target for subsampling")
    p.add_argument("--normal-fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("preprocess", help="labelled CSV -> encoded dataset directory")
    p.add_argument("labeled")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the multi-class or a binary network")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="weights file")
    p.add_argument("--mode", choices=MODES, default="multiclass")
    p.add_argument("--subcategory", choices=ATTACK_SUBCATEGORIES)
    p.add_argument("--transfer", help="multi-class weights whose embeddings seed a binary model")
    p.add_argument("--unfreeze", action="store_true", help="let transferred embeddings train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--l1", type=float, default=0.0)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--dropout", type=float, default=0.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="confusion matrix and metrics on a split")
    _model_opts(p)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="per-row class codes")
    _model_opts(p, split="all")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("baseline", help="linear SVC grid search on a subsample")
    p.add_argument("--data", required=True, help="dataset directory written by preprocess")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--sample-size", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--C", type=float, nargs="+", default=list(svm.C_GRID))
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--max-iter", type=int, default=10000)
    p.add_argument("--solver", choices=("dcd", "subgradient"), default="dcd")
    p.set_defaults(func=cmd_baseline)

    for sp in sub.choices.values():
        _common(sp)
    return parser


def _parse(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sp = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(sp, read_config(args.config))
        args = parser.parse_args(argv)
    return args


def _thread_limit(n: int):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=n)


DATA_ERRORS = (capture.CaptureError, pipeline.SchemaMismatch, pipeline.TooFewRows,
               pipeline.ZeroClass, labeling.EmptyClass, ChecksumMismatch, ArchMismatch,
               nn.ShapeMismatch, trafficgen.BudgetOverflow, OSError, ValueError, KeyError)


def run(argv=None) -> int:
    try:
        args = _parse(argv)
    except UsageError as exc:
        print(f"pktids: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"pktids: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (nn.NonFiniteLoss, FloatingPointError) as exc:
        print(f"pktids: numeric failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"pktids: data error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
