"""Command-line entry point: ``labelflows <subcommand> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import MISSING, fields
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import flows, theory, weaksig
from .experiment import ExperimentConfig, run
from .trainer import evaluate, predict, train_llf, train_llf_wo_nll


def _add_data_args(p, split=True):
    p.add_argument("--data", required=True, help="CSV path or builtin:<name>")
    if split:
        p.add_argument("--split", required=True, help="split file (one of train/sim/test per row)")


def _load_split_data(args) -> data_mod.TabularDataset:
    data = data_mod.load_dataset(args.data)
    return data.with_splits(data_mod.read_split_file(args.split))


def cmd_split(args) -> int:
    data = data_mod.load_dataset(args.data)
    assignment = data_mod.random_split(len(data), data_mod.parse_ratio(args.ratio), args.seed)
    data_mod.write_split_file(assignment, args.out)
    sizes = {name: int(np.sum(assignment == name)) for name in data_mod.SPLIT_NAMES}
    print(f"wrote {args.out}: " + " ".join(f"{k}={v}" for k, v in sizes.items()))
    return 0


def cmd_synth_signals(args) -> int:
    data = _load_split_data(args)
    if args.task == "classification":
        signals = weaksig.synth_classification_signals(data, args.features, bound_method=args.bound_method)
        weaksig.save_signals(signals, args.out)
        print(f"wrote {args.out} and {weaksig.default_bounds_path(args.out)}")
    else:
        scaler = weaksig.LabelScaler.fit(data.part("sim")[1])
        rules = weaksig.synth_regression_rules(data, args.features, scaler)
        weaksig.save_rules(rules, scaler, args.out)
        print(f"wrote {len(rules)} rules to {args.out}")
    return 0


def _train_signals(args, data):
    train_idx = data.indices("train")
    if args.task == "regression":
        rules, scaler = weaksig.load_rules(args.signals)
        return weaksig.RegressionRuleSignals.on(rules, data.X[train_idx]), scaler
    signals = weaksig.load_signals(args.signals, args.bounds)
    if signals.n_samples == len(data):
        return signals.subset(train_idx), None
    if signals.n_samples == len(train_idx):
        return signals, None
    raise ValueError(f"{signals.n_samples} signal rows match neither the dataset ({len(data)}) "
                     f"nor its training split ({len(train_idx)})")


def cmd_train(args) -> int:
    data = _load_split_data(args)
    cfg = ExperimentConfig(**_config_overrides(args, base={"dataset": args.data, "task": args.task}))
    tcfg = cfg.train_config(args.seed)
    signals, scaler = _train_signals(args, data)
    fit = train_llf_wo_nll if args.no_nll else train_llf
    model, result = fit(data.part("train")[0], signals, tcfg, scaler=scaler)
    flows.save_checkpoint(model, args.out)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "violation"])
            for k, row in enumerate(zip(result.loss_trace, result.violation_trace), start=1):
                writer.writerow([k, *map(repr, row)])
    print(f"trained {result.epochs} epochs in {result.wall_s:.1f}s; final loss {result.loss_trace[-1]:.6g}; "
          f"weak-signal violation {result.violation_trace[0]:.4g} -> {result.violation_trace[-1]:.4g}")
    return 0


def cmd_predict(args) -> int:
    model = flows.load_checkpoint(args.model)
    data = data_mod.load_dataset(args.data)
    idx = np.arange(len(data))
    if args.split:
        idx = data.with_splits(data_mod.read_split_file(args.split)).indices(args.part)
    preds = predict(model, data.X[idx], args.samples)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "prediction"])
        writer.writerows([[int(i), repr(float(p))] for i, p in zip(idx, preds)])
    print(f"wrote {len(idx)} predictions to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    data = data_mod.load_dataset(args.data)
    if data.y is None:
        raise ValueError("dataset has no gold label column")
    with open(args.pred, newline="") as fh:
        rows = list(csv.DictReader(fh))
    idx = np.array([int(r["row"]) for r in rows], dtype=int)
    preds = np.array([float(r["prediction"]) for r in rows])
    metric = evaluate(preds, data.y[idx], args.task)
    name = "accuracy" if args.task == "classification" else "rmse"
    print(f"{name} {metric:.6f}")
    return 0


def _config_overrides(args, base=None) -> dict:
    raw = dict(base or {})
    if getattr(args, "config", None):
        raw.update(json.loads(Path(args.config).read_text()))
    for f in fields(ExperimentConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            raw[f.name] = value
    return raw


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_dict(_config_overrides(args))
    report = run(cfg, args.out)
    print(report.to_text(), end="")
    return 0


def cmd_theorem_check(args) -> int:
    rows = theory.theorem_check(args.n_random, args.seed)
    cols = ["instance", "lhs", "q", "jensen_rhs", "printed_rhs", "jensen_ok", "printed_ok"]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(cols)
        for r in rows:
            writer.writerow([r["instance"]] + [repr(r[c]) for c in cols[1:5]] + [int(r["jensen_ok"]), int(r["printed_ok"])])
    finally:
        if args.out:
            out.close()
    failed = [r["instance"] for r in rows if not r["jensen_ok"]]
    n_printed = sum(r["printed_ok"] for r in rows)
    print(f"jensen bound held on {len(rows) - len(failed)}/{len(rows)} instances; "
          f"printed form held on {n_printed}/{len(rows)}", file=sys.stderr)
    return 1 if failed else 0


_LIST_FIELDS = {"features": int, "seeds": int, "methods": str}


def _add_config_flags(p, skip=()):
    """One optional flag per ExperimentConfig field; unset flags keep config/default values."""
    for f in fields(ExperimentConfig):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        default = f.default if f.default is not MISSING else f.default_factory()
        help_text = f"default {default!r}"
        if f.name in _LIST_FIELDS:
            p.add_argument(flag, dest=f.name, nargs="+", type=_LIST_FIELDS[f.name], help=help_text)
        elif isinstance(default, bool):
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None, help=help_text)
        elif f.name == "clip_factor":
            p.add_argument(flag, dest=f.name, type=float, help=help_text + " (0 disables)")
        else:
            kind = type(default) if default is not None else str
            p.add_argument(flag, dest=f.name, type=kind, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="labelflows", description="Label learning flows for weak supervision")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write a seeded train/sim/test split file")
    _add_data_args(p, split=False)
    p.add_argument("--ratio", default="4:3:3")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("synth-signals", help="fit weak labelers / rules on the simulation split")
    _add_data_args(p)
    p.add_argument("--task", choices=("classification", "regression"), default="classification")
    p.add_argument("--features", type=int, nargs="+", required=True)
    p.add_argument("--bound-method", choices=sorted(weaksig.BOUND_METHODS), default="expected")
    p.add_argument("--out", required=True, help="signals CSV (classification) or rules JSON (regression)")
    p.set_defaults(func=cmd_synth_signals)

    p = sub.add_parser("train", help="train a label flow on the training split")
    _add_data_args(p)
    p.add_argument("--signals", required=True)
    p.add_argument("--bounds", help="bounds CSV; default <signals>.bounds.csv or 0.01")
    p.add_argument("--task", choices=("classification", "regression"), default="classification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-nll", action="store_true", help="ablation without the likelihood term")
    p.add_argument("--out", required=True, help="checkpoint .npz")
    p.add_argument("--trace", help="per-epoch loss/violation CSV")
    _add_config_flags(p, skip={"dataset", "task", "seeds", "methods", "jobs", "split_file", "ratio", "split_seed",
                               "split_mode", "signal_source", "features", "signal_file", "bounds_file",
                               "bound_method", "ts_epochs", "ts_hidden"})
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="sample-average predictions from a checkpoint")
    _add_data_args(p, split=False)
    p.add_argument("--model", required=True)
    p.add_argument("--split")
    p.add_argument("--part", default="test", choices=data_mod.SPLIT_NAMES)
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="accuracy or RMSE of a predictions CSV")
    _add_data_args(p, split=False)
    p.add_argument("--pred", required=True)
    p.add_argument("--task", choices=("classification", "regression"), default="classification")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="multi-seed experiment with aggregate report")
    p.add_argument("--config", help="flat JSON config; flags override it")
    p.add_argument("--out", help="output directory for results.jsonl, traces and reports")
    _add_config_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("theorem-check", help="numerical check of the dequantization bound")
    p.add_argument("--n-random", type=int, default=50, help="random instances besides the uniform one")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_theorem_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, IndexError, FileNotFoundError, theory.QuadratureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
