"""Weak signals: synthesis from a labeled simulation split, file I/O and the AVG baseline."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import TabularDataset

logger = logging.getLogger(__name__)

DEFAULT_BOUND = 0.01


@dataclass
class ClassificationSignals:
    """Soft positive-class votes ``q`` (N, M), NaN where a labeler abstains,
    with per-labeler, per-class error-rate bounds (M, 2)."""

    q: np.ndarray
    bounds: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=np.float64)
        if self.q.ndim == 1:
            self.q = self.q[:, None]
        n_signals = self.q.shape[1]
        self.bounds = np.broadcast_to(np.asarray(self.bounds, dtype=np.float64), (n_signals, 2)).copy()
        present = self.q[~np.isnan(self.q)]
        if ((present < 0) | (present > 1)).any():
            raise ValueError("signal probabilities must lie in [0, 1]")
        if ((self.bounds < 0) | (self.bounds > 1)).any() or np.isnan(self.bounds).any():
            raise ValueError("error-rate bounds must lie in [0, 1]")

    @property
    def n_samples(self) -> int:
        return self.q.shape[0]

    @property
    def n_signals(self) -> int:
        return self.q.shape[1]

    @property
    def mask(self) -> np.ndarray:
        """True where the labeler voted."""
        return ~np.isnan(self.q)

    @property
    def coverage(self) -> np.ndarray:
        """Per-signal count of non-null votes."""
        return self.mask.sum(axis=0)

    def class_votes(self, j: int) -> np.ndarray:
        """Vote mass on class ``j`` (0 where null)."""
        p = np.nan_to_num(self.q, nan=0.0)
        return np.where(self.mask, p if j == 1 else 1.0 - p, 0.0)

    def subset(self, idx) -> "ClassificationSignals":
        return ClassificationSignals(self.q[idx], self.bounds)

    def permuted(self, order) -> "ClassificationSignals":
        order = list(order)
        return ClassificationSignals(self.q[:, order], self.bounds[order])


@dataclass
class RegressionRule:
    """``x[feature] >= threshold`` selects group 1 with label estimate ``high``; else ``low``."""

    feature: int
    threshold: float
    high: float
    low: float

    def members(self, X: np.ndarray) -> np.ndarray:
        return X[:, self.feature] >= self.threshold

    def estimate(self, X: np.ndarray) -> np.ndarray:
        return np.where(self.members(X), self.high, self.low)


@dataclass
class RegressionRuleSignals:
    """Threshold rules plus their group masks on the rows being trained on."""

    rules: list[RegressionRule]
    masks: np.ndarray = field(default=None)

    def __post_init__(self):
        for r in self.rules:
            if not (0.0 <= r.high <= 1.0 and 0.0 <= r.low <= 1.0):
                raise ValueError(f"rule estimates must lie in [0, 1] (normalized labels): {r}")

    @classmethod
    def on(cls, rules, X: np.ndarray, drop_empty: bool = True) -> "RegressionRuleSignals":
        """Bind rules to rows ``X``; rules with an empty group are dropped with a warning."""
        kept, masks = [], []
        for r in rules:
            m = r.members(X)
            if drop_empty and (m.all() or not m.any()):
                logger.warning("dropping rule on feature %d: one side of threshold %.6g is empty",
                               r.feature, r.threshold)
                continue
            kept.append(r)
            masks.append(m)
        masks = np.array(masks, dtype=bool).reshape(len(kept), X.shape[0])
        return cls(kept, masks)

    @property
    def n_rules(self) -> int:
        return len(self.rules)

    def to_json(self) -> str:
        return json.dumps([vars(r) for r in self.rules], indent=1)

    @staticmethod
    def rules_from_json(text: str) -> list[RegressionRule]:
        return [RegressionRule(int(r["feature"]), float(r["threshold"]), float(r["high"]), float(r["low"]))
                for r in json.loads(text)]


@dataclass(frozen=True)
class LabelScaler:
    """Affine map of raw labels in ``[low, high]`` onto ``[0, 1]``."""

    low: float
    high: float

    def __post_init__(self):
        if not self.high > self.low:
            raise ValueError(f"label range upper end must exceed lower end, got [{self.low}, {self.high}]")

    @classmethod
    def fit(cls, y) -> "LabelScaler":
        y = np.asarray(y, dtype=np.float64)
        return cls(float(y.min()), float(y.max()))


def normalize_labels(y_raw, scaler: LabelScaler) -> np.ndarray:
    return (np.asarray(y_raw, dtype=np.float64) - scaler.low) / (scaler.high - scaler.low)


def denormalize_labels(y, scaler: LabelScaler) -> np.ndarray:
    return np.asarray(y, dtype=np.float64) * (scaler.high - scaler.low) + scaler.low


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def fit_logistic_1d(x: np.ndarray, y: np.ndarray, iters: int = 2000, step: float = 0.1):
    """Full-batch gradient descent on the mean logistic loss; returns ``(w, b)``."""
    w = b = 0.0
    for _ in range(iters):
        r = _sigmoid(w * x + b) - y
        w -= step * np.mean(r * x)
        b -= step * np.mean(r)
    return w, b


def expected_error(prob: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean soft disagreement  (1 - y_j) q_j + y_j (1 - q_j)  per class j, over voted rows.

    With one-hot ``y`` this equals the weak-signal constraint's left side at the
    gold labels divided by the coverage, so gold labels meet their bounds exactly.
    """
    voted = ~np.isnan(prob)
    if not voted.any():
        return np.zeros(2)
    q1, y1 = prob[voted], y[voted]
    out = np.empty(2)
    for j, (qj, yj) in enumerate(((1.0 - q1, 1.0 - y1), (q1, y1))):
        out[j] = np.mean((1.0 - yj) * qj + yj * (1.0 - qj))
    return out


def per_class_error(prob: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Fraction of class-j rows the thresholded labeler gets wrong, j = 0, 1.

    A class absent from ``y`` gets bound 0.
    """
    pred = prob >= 0.5
    out = np.zeros(2)
    for j in (0, 1):
        rows = y == j
        if rows.any():
            out[j] = np.mean(pred[rows] != bool(j))
    return out


BOUND_METHODS = {"expected": expected_error, "per_class": per_class_error}


def synth_classification_signals(data: TabularDataset, features, sim_split: str = "sim",
                                 iters: int = 2000, step: float = 0.1,
                                 bound_method: str = "expected") -> ClassificationSignals:
    """One logistic-regression labeler per feature, fit on the simulation split.

    Signals cover every row of ``data``.  Bounds are measured on the simulation
    split: ``"expected"`` is the soft disagreement rate (see
    :func:`expected_error`), ``"per_class"`` the thresholded error rate within
    each gold class.
    """
    bound_fn = BOUND_METHODS[bound_method]
    X_sim, y_sim = data.part(sim_split)
    if y_sim is None:
        raise ValueError("simulation split needs gold labels")
    if not np.isin(y_sim, (0.0, 1.0)).all():
        raise ValueError("classification labels must be 0/1")
    q = np.empty((len(data), len(features)))
    bounds = np.empty((len(features), 2))
    for m, f in enumerate(features):
        if not 0 <= f < data.n_features:
            raise IndexError(f"feature index {f} out of range for {data.n_features} features")
        mu, sd = X_sim[:, f].mean(), X_sim[:, f].std()
        if not sd > 0:
            raise ValueError(f"feature {f} ({data.feature_names[f]}) has zero variance on the simulation split")
        w, b = fit_logistic_1d((X_sim[:, f] - mu) / sd, y_sim, iters, step)
        q[:, m] = _sigmoid(w * (data.X[:, f] - mu) / sd + b)
        bounds[m] = bound_fn(q[data.indices(sim_split), m], y_sim)
    return ClassificationSignals(q, bounds)


def synth_regression_rules(data: TabularDataset, features, scaler: LabelScaler,
                           sim_split: str = "sim") -> list[RegressionRule]:
    """Mean-threshold rules with group label means from the simulation split."""
    X_sim, y_sim = data.part(sim_split)
    if y_sim is None:
        raise ValueError("simulation split needs gold labels")
    y_sim = np.clip(normalize_labels(y_sim, scaler), 0.0, 1.0)
    rules = []
    for f in features:
        if not 0 <= f < data.n_features:
            raise IndexError(f"feature index {f} out of range for {data.n_features} features")
        eps = float(X_sim[:, f].mean())
        hi = X_sim[:, f] >= eps
        if hi.all() or not hi.any():
            logger.warning("feature %d is constant on the simulation split; no rule", f)
            continue
        rules.append(RegressionRule(int(f), eps, float(y_sim[hi].mean()), float(y_sim[~hi].mean())))
    return rules


def synth_regression_signals(data: TabularDataset, features, scaler: LabelScaler,
                             sim_split: str = "sim", train_split: str = "train") -> RegressionRuleSignals:
    rules = synth_regression_rules(data, features, scaler, sim_split)
    return RegressionRuleSignals.on(rules, data.part(train_split)[0])


def save_rules(rules, scaler: LabelScaler, path) -> None:
    """Rules plus the label range they were normalized with, as JSON."""
    payload = {"label_range": [scaler.low, scaler.high], "rules": [vars(r) for r in rules]}
    Path(path).write_text(json.dumps(payload, indent=1))


def load_rules(path) -> tuple[list[RegressionRule], LabelScaler]:
    payload = json.loads(Path(path).read_text())
    rules = RegressionRuleSignals.rules_from_json(json.dumps(payload["rules"]))
    return rules, LabelScaler(*payload["label_range"])


def save_signals(signals: ClassificationSignals, path, bounds_path=None) -> None:
    """Signals CSV (empty cell = null) plus a ``bound_0,bound_1`` sidecar."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"signal_{m + 1}" for m in range(signals.n_signals)])
        for row in signals.q:
            writer.writerow(["" if np.isnan(v) else repr(float(v)) for v in row])
    bounds_path = Path(bounds_path) if bounds_path else default_bounds_path(path)
    with open(bounds_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bound_0", "bound_1"])
        writer.writerows([[repr(float(b)) for b in row] for row in signals.bounds])


def default_bounds_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".bounds.csv")


def load_signals(path, bounds_path=None, n_rows: int | None = None) -> ClassificationSignals:
    """Read a signals CSV; bounds come from the sidecar if present, else 0.01."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    for row_no, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}:{row_no}: expected {len(header)} cells, got {len(row)}")
    q = np.array([[float(c) if c.strip() else np.nan for c in row] for row in rows]).reshape(len(rows), len(header))
    if n_rows is not None and q.shape[0] != n_rows:
        raise ValueError(f"{path}: {q.shape[0]} signal rows but {n_rows} samples")
    bad = ~np.isnan(q) & ((q < 0) | (q > 1))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise ValueError(f"{path}:{r + 2}: {header[c]}={q[r, c]} outside [0, 1]")
    bounds_path = Path(bounds_path) if bounds_path else default_bounds_path(path)
    if bounds_path.exists():
        with open(bounds_path, newline="") as fh:
            reader = csv.reader(fh)
            first = next(reader)
            brows = [first] if _is_number(first[0]) else []
            brows += [row for row in reader if row]
        bounds = np.array(brows, dtype=np.float64)
        if bounds.shape != (q.shape[1], 2):
            raise ValueError(f"{bounds_path}: expected {q.shape[1]} rows x 2 columns, got {bounds.shape}")
    else:
        bounds = np.full((q.shape[1], 2), DEFAULT_BOUND)
    return ClassificationSignals(q, bounds)


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def avg_classification(signals: ClassificationSignals) -> np.ndarray:
    """Mean non-null positive-class vote per row; 0.5 where every labeler abstains."""
    q = signals.q
    counts = signals.mask.sum(axis=1)
    total = np.nansum(q, axis=1)
    return np.where(counts > 0, total / np.maximum(counts, 1), 0.5)


def avg_baseline(signals, X: np.ndarray | None = None) -> np.ndarray:
    """AVG predictions: hard 0/1 labels (ties positive) or normalized regression values."""
    if isinstance(signals, ClassificationSignals):
        return (avg_classification(signals) >= 0.5).astype(np.float64)
    rules = signals.rules if isinstance(signals, RegressionRuleSignals) else list(signals)
    if X is None:
        raise ValueError("regression AVG needs the feature rows")
    if not rules:
        raise ValueError("no regression rules")
    return np.mean([r.estimate(X) for r in rules], axis=0)
