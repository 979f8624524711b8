"""Multi-seed experiment protocol: config, per-run execution, results file and aggregate report."""
from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import weaksig
from .objectives import PenaltyConfig
from .trainer import TrainConfig, TrainingAborted, evaluate, predict, train_llf, train_llf_wo_nll, train_two_stage

logger = logging.getLogger(__name__)

METHODS = ("avg", "llf", "llf_wo_nll", "llf_ts")
DEFAULT_SEEDS = (0, 10, 100, 123, 1234)
SPLIT_MODES = ("fixed", "per_seed")


@dataclass
class ExperimentConfig:
    """Flat, JSON-serializable description of one experiment."""

    dataset: str = "builtin:breast_cancer"
    task: str = "classification"
    split_file: str | None = None
    ratio: str = "4:3:3"
    split_seed: int = 0
    split_mode: str = "fixed"
    signal_source: str = "synthesize"
    features: list = field(default_factory=lambda: [0, 1, 7])
    signal_file: str | None = None
    bounds_file: str | None = None
    bound_method: str = "expected"
    flow: str = "auto"
    n_steps: int = 8
    hidden: int = 64
    max_epochs: int = 2000
    lr0: float = 1e-3
    decay: float = 0.996
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_samples: int = 1
    predict_samples: int = 10
    stop_window: int = 10
    stop_rel_tol: float = 1e-6
    min_epochs: int = 100
    clip_factor: float | None = 5.0
    lam1: float = 10.0
    lam2: float = 10.0
    lam3: float = 10.0
    lam4: float = 10.0
    literal_box: bool = False
    ts_epochs: int = 200
    ts_hidden: int = 512
    methods: list = field(default_factory=lambda: ["avg", "llf"])
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    jobs: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.task not in ("classification", "regression"):
            raise ValueError(f"task must be classification or regression, got {self.task!r}")
        if not self.seeds:
            raise ValueError("seed list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise ValueError(f"methods must be a nonempty subset of {METHODS}, got {self.methods}")
        if self.split_mode not in SPLIT_MODES:
            raise ValueError(f"split_mode must be one of {SPLIT_MODES}")
        if self.signal_source not in ("synthesize", "files"):
            raise ValueError("signal_source must be 'synthesize' or 'files'")
        if self.signal_source == "files" and not self.signal_file:
            raise ValueError("signal_source 'files' needs signal_file")
        if self.task == "regression" and "llf_ts" in self.methods:
            raise ValueError("llf_ts is a classification method")
        if self.flow not in ("auto", "coupling", "affine"):
            raise ValueError(f"unknown flow selector {self.flow!r}")
        expected = {"classification": "coupling", "regression": "affine"}[self.task]
        if self.flow not in ("auto", expected):
            raise ValueError(f"{self.task} needs the {expected} flow")
        data_mod.parse_ratio(self.ratio)
        for path in (self.split_file, self.signal_file, self.bounds_file):
            if path and not Path(path).exists():
                raise FileNotFoundError(path)
        if not self.dataset.startswith("builtin:") and not Path(self.dataset).exists():
            raise FileNotFoundError(self.dataset)

    def train_config(self, seed: int) -> TrainConfig:
        penalty = PenaltyConfig(self.lam1, self.lam2, self.lam3, self.lam4, literal_box=self.literal_box)
        return TrainConfig(max_epochs=self.max_epochs, lr0=self.lr0, decay=self.decay, beta1=self.beta1,
                           beta2=self.beta2, eps=self.eps, train_samples=self.train_samples,
                           predict_samples=self.predict_samples, seed=seed, stop_window=self.stop_window,
                           stop_rel_tol=self.stop_rel_tol, min_epochs=self.min_epochs, n_steps=self.n_steps,
                           hidden=self.hidden, clip_factor=self.clip_factor, penalty=penalty)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Prepared:
    """Data, split and signals for one split; classification signals cover every row."""

    data: data_mod.TabularDataset
    signals: object
    scaler: weaksig.LabelScaler | None = None
    rules: list | None = None

    def train_signals(self):
        if self.rules is not None:
            return weaksig.RegressionRuleSignals.on(self.rules, self.data.part("train")[0])
        return self.signals.subset(self.data.indices("train"))


def prepare(cfg: ExperimentConfig, split_seed: int | None = None) -> Prepared:
    data = data_mod.load_dataset(cfg.dataset)
    if data.y is None:
        raise ValueError("experiments need gold labels for the simulation and test splits")
    if cfg.split_file:
        assignment = data_mod.read_split_file(cfg.split_file)
    else:
        seed = cfg.split_seed if split_seed is None else split_seed
        assignment = data_mod.random_split(len(data), data_mod.parse_ratio(cfg.ratio), seed)
    data = data.with_splits(assignment)
    if cfg.task == "classification":
        if cfg.signal_source == "files":
            signals = weaksig.load_signals(cfg.signal_file, cfg.bounds_file, n_rows=len(data))
        else:
            signals = weaksig.synth_classification_signals(data, cfg.features, bound_method=cfg.bound_method)
        return Prepared(data, signals)
    if cfg.signal_source == "files":
        rules, scaler = weaksig.load_rules(cfg.signal_file)
    else:
        scaler = weaksig.LabelScaler.fit(data.part("sim")[1])
        rules = weaksig.synth_regression_rules(data, cfg.features, scaler)
    return Prepared(data, None, scaler, rules)


def _avg_predictions(prep: Prepared, split: str) -> np.ndarray:
    idx = prep.data.indices(split)
    if prep.rules is not None:
        norm = weaksig.avg_baseline(prep.rules, prep.data.X[idx])
        return weaksig.denormalize_labels(norm, prep.scaler)
    return weaksig.avg_baseline(prep.signals.subset(idx))


def run_seed(cfg: ExperimentConfig, seed: int, methods=None, prep: Prepared | None = None) -> list[dict]:
    """All requested methods for one seed; LLF-TS reuses the seed's LLF model."""
    methods = list(methods or cfg.methods)
    if prep is None:
        prep = prepare(cfg, seed if cfg.split_mode == "per_seed" else None)
    X_train = prep.data.part("train")[0]
    X_test, y_test = prep.data.part("test")
    tcfg = cfg.train_config(seed)
    records, llf_model = [], None
    for method in METHODS:
        if method not in methods:
            continue
        rec = {"dataset": cfg.dataset, "method": method, "seed": seed, "metric": None, "epochs": 0,
               "wall_s": 0.0, "status": "ok"}
        t0 = time.perf_counter()
        try:
            if method == "avg":
                preds = _avg_predictions(prep, "test")
            elif method == "llf_ts":
                if llf_model is None:
                    llf_model, res = train_llf(X_train, prep.train_signals(), tcfg, scaler=prep.scaler)
                    rec.update(_trace_fields(res))
                clf = train_two_stage(llf_model, X_train, tcfg, epochs=cfg.ts_epochs, hidden=cfg.ts_hidden)
                preds = clf.predict(X_test)
            else:
                fit = train_llf if method == "llf" else train_llf_wo_nll
                model, res = fit(X_train, prep.train_signals(), tcfg, scaler=prep.scaler)
                if method == "llf":
                    llf_model = model
                rec.update(_trace_fields(res))
                preds = predict(model, X_test, tcfg.predict_samples, task=cfg.task)
            rec["metric"] = evaluate(preds, y_test, cfg.task)
        except (TrainingAborted, FloatingPointError, ValueError) as exc:
            logger.error("%s seed=%d aborted: %s", method, seed, exc)
            rec["status"] = f"aborted: {exc}"
        rec["wall_s"] = round(time.perf_counter() - t0, 3)
        records.append(rec)
    return records


def _trace_fields(res) -> dict:
    return {"epochs": res.epochs, "violation_first": res.violation_trace[0],
            "violation_final": res.violation_trace[-1], "loss_trace": res.loss_trace,
            "violation_trace": res.violation_trace}


def _run_seed_job(args):
    cfg, seed = args
    return run_seed(cfg, seed)


def run(cfg: ExperimentConfig, out_dir=None) -> "AggregateReport":
    """Every method x seed; writes results.jsonl, traces and report files when ``out_dir`` is set."""
    jobs = [(cfg, s) for s in cfg.seeds]
    shared = prepare(cfg) if cfg.split_mode == "fixed" else None
    out = Path(out_dir) if out_dir else None
    if out:
        (out / "traces").mkdir(parents=True, exist_ok=True)
        (out / "results.jsonl").write_text("")
    records = []

    def consume(batch):
        # single writer: only the parent process touches the output files
        for rec in batch:
            if out:
                _write_traces(out / "traces", rec)
                with open(out / "results.jsonl", "a") as fh:
                    fh.write(json.dumps(result_line(rec)) + "\n")
            records.append(rec)

    if cfg.jobs > 1 and len(jobs) > 1:
        from multiprocessing import Pool

        with Pool(min(cfg.jobs, len(jobs))) as pool:
            for batch in pool.imap(_run_seed_job, jobs):
                consume(batch)
    else:
        for c, s in jobs:
            consume(run_seed(c, s, prep=shared))
    report = AggregateReport.from_records(records, cfg)
    if out:
        (out / "report.txt").write_text(report.to_text())
        (out / "report.csv").write_text(report.to_csv())
    return report


def result_line(rec: dict) -> dict:
    keep = ("dataset", "method", "seed", "metric", "epochs", "wall_s", "status", "violation_first",
            "violation_final")
    return {k: rec[k] for k in keep if k in rec}


def _write_traces(folder: Path, rec: dict) -> None:
    if "loss_trace" not in rec:
        return
    with open(folder / f"{rec['method']}_seed{rec['seed']}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "violation"])
        for k, (loss, viol) in enumerate(zip(rec["loss_trace"], rec["violation_trace"]), start=1):
            writer.writerow([k, repr(loss), repr(viol)])


def read_results(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


@dataclass
class AggregateReport:
    """Per-method mean and population std over the declared seeds; missing cells stay ``None``."""

    seeds: list
    methods: list
    values: dict
    config_json: str = ""

    @classmethod
    def from_records(cls, records, cfg: ExperimentConfig | None = None, seeds=None, methods=None):
        seeds = list(seeds if seeds is not None else cfg.seeds)
        methods = list(methods if methods is not None else [m for m in METHODS if m in cfg.methods])
        values = {m: {s: None for s in seeds} for m in methods}
        for rec in records:
            if rec["method"] in values and rec["seed"] in values[rec["method"]]:
                values[rec["method"]][rec["seed"]] = rec["metric"]
        return cls(seeds, methods, values, cfg.to_json() if cfg else "")

    def per_seed(self, method: str) -> list:
        return [self.values[method][s] for s in self.seeds]

    def mean(self, method: str) -> float | None:
        vals = self.per_seed(method)
        return None if None in vals else float(np.mean(vals))

    def std(self, method: str) -> float | None:
        vals = self.per_seed(method)
        return None if None in vals else float(np.std(vals))

    def to_text(self) -> str:
        lines = ["# config"] + [f"# {line}" for line in self.config_json.splitlines()] if self.config_json else []
        head = f"{'method':<12} {'mean_std':<18}" + "".join(f" {'seed ' + str(s):>12}" for s in self.seeds)
        lines.append(head)
        for m in self.methods:
            mean, std = self.mean(m), self.std(m)
            cell = "NA" if mean is None else f"{mean:.4f}_{{{std:.4f}}}"
            vals = "".join(f" {'NA' if v is None else f'{v:.4f}':>12}" for v in self.per_seed(m))
            lines.append(f"{m:<12} {cell:<18}{vals}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["method", "mean", "std"] + [f"seed_{s}" for s in self.seeds])
        for m in self.methods:
            fmt = lambda v: "NA" if v is None else repr(v)  # noqa: E731
            writer.writerow([m, fmt(self.mean(m)), fmt(self.std(m))] + [fmt(v) for v in self.per_seed(m)])
        return buf.getvalue()


def with_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
