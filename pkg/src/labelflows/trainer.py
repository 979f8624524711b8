"""Full-batch training of label flows from weak signals, prediction and metrics."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import diffcore as dc
from . import flows
from .diffcore import AdamState, Tape, adam_step
from .objectives import (
    PenaltyConfig,
    classification_penalty,
    nll_term,
    regression_penalty,
    violation_report,
)
from .weaksig import ClassificationSignals, LabelScaler, RegressionRuleSignals, denormalize_labels

logger = logging.getLogger(__name__)

TASKS = ("classification", "regression")


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 2000
    lr0: float = 1e-3
    decay: float = 0.996
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    train_samples: int = 1
    predict_samples: int = 10
    seed: int = 0
    stop_window: int = 10
    stop_rel_tol: float = 1e-6
    min_epochs: int = 100
    n_steps: int = 8
    hidden: int = 64
    clip_factor: float | None = 5.0
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be positive")
        if self.train_samples < 1 or self.predict_samples < 1:
            raise ValueError("sample counts must be >= 1")


@dataclass
class RunResult:
    method: str
    seed: int
    loss_trace: list[float] = field(default_factory=list)
    violation_trace: list[float] = field(default_factory=list)
    epochs: int = 0
    stopped_early: bool = False
    wall_s: float = 0.0
    metric: float | None = None
    predictions: np.ndarray | None = None


class TrainingAborted(RuntimeError):
    """Non-finite loss or gradient; ``model`` holds the last finite parameters."""

    def __init__(self, epoch: int, model, cause: Exception):
        super().__init__(f"training aborted at epoch {epoch}: {cause}")
        self.epoch = epoch
        self.model = model


class GradientCap:
    """Rescales gradients whose norm exceeds ``factor`` times the running mean norm.

    ``factor`` None or 0 disables capping.

    A single heavy-tailed prior draw can produce a gradient many orders of
    magnitude above typical; left alone it inflates Adam's second moment and
    stalls training for thousands of epochs.
    """

    def __init__(self, factor: float | None = 5.0, momentum: float = 0.9):
        self.factor = factor
        self.momentum = momentum
        self.avg = None

    def __call__(self, grad: np.ndarray) -> np.ndarray:
        if not self.factor:
            return grad
        norm = float(np.linalg.norm(grad))
        if self.avg is not None and norm > self.factor * self.avg:
            grad = grad * (self.factor * self.avg / norm)
            norm = self.factor * self.avg
        self.avg = norm if self.avg is None else self.momentum * self.avg + (1 - self.momentum) * norm
        return grad


class EarlyStopper:
    """Stops once the best loss has not improved by a relative ``tol`` for
    ``window`` epochs, but never before ``min_epochs``."""

    def __init__(self, window: int = 10, tol: float = 1e-6, min_epochs: int = 0):
        self.window = window
        self.tol = tol
        self.min_epochs = min_epochs
        self.best = np.inf
        self.stale = 0
        self.seen = 0

    def update(self, loss: float) -> bool:
        self.seen += 1
        if loss < self.best - self.tol * abs(self.best) or not np.isfinite(self.best):
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.window and self.seen >= self.min_epochs


def _feature_stats(X: np.ndarray) -> dict:
    sd = X.std(axis=0)
    return {"x_mean": X.mean(axis=0).tolist(), "x_std": np.where(sd > 0, sd, 1.0).tolist()}


def prepare_features(model: flows.FlowModel, X: np.ndarray) -> np.ndarray:
    """Apply the z-scoring stored with the model (identity if none)."""
    X = np.asarray(X, dtype=np.float64)
    if "x_mean" not in model.meta:
        return X
    return (X - np.asarray(model.meta["x_mean"])) / np.asarray(model.meta["x_std"])


def build_flow(task: str, x_dim: int, cfg: TrainConfig) -> flows.FlowModel:
    if task == "classification":
        return flows.coupling_flow(x_dim, cfg.n_steps, cfg.hidden, seed=cfg.seed)
    if task == "regression":
        return flows.affine_flow(x_dim, cfg.n_steps, cfg.hidden, seed=cfg.seed)
    raise ValueError(f"unknown task {task!r}")


def _task_of(signals) -> str:
    if isinstance(signals, ClassificationSignals):
        return "classification"
    if isinstance(signals, RegressionRuleSignals):
        return "regression"
    raise TypeError(f"unsupported signal type {type(signals).__name__}")


def make_objective(model: flows.FlowModel, signals, penalty: PenaltyConfig, record=None):
    """Loss ``fn(P, x, z)`` for :meth:`Tape.forward`; ``z`` is (L_t, N, label_dim).

    ``record``, if given, receives the label columns of the first draw.
    """
    task = _task_of(signals)

    def objective(P, x, z):
        total = 0.0
        for k in range(z.shape[0]):
            cols, logdet = flows.generate_columns(model, P, x, [z[k][:, [j]] for j in range(z.shape[2])])
            if k == 0 and record is not None:
                record(cols)
            if task == "classification":
                loss = classification_penalty(cols, signals, penalty)
            else:
                loss = regression_penalty(cols, signals, penalty)
            if penalty.include_nll:
                loss = dc.add(loss, nll_term(z[k], logdet))
            total = dc.add(total, loss)
        return dc.mul(total, 1.0 / z.shape[0])

    return objective


def train_llf(X: np.ndarray, signals, cfg: TrainConfig = TrainConfig(), model: flows.FlowModel | None = None,
              method: str = "llf", scaler: LabelScaler | None = None):
    """Fit a label flow on training rows ``X`` under weak-signal penalties.

    One epoch = one fresh prior draw per row, one full-batch Adam step and one
    learning-rate decay.  Returns ``(model, RunResult)``.
    """
    t0 = time.perf_counter()
    task = _task_of(signals)
    X = np.asarray(X, dtype=np.float64)
    n_rows = signals.n_samples if task == "classification" else signals.masks.shape[1]
    if X.shape[0] == 0 or X.shape[0] != n_rows:
        raise ValueError(f"{X.shape[0]} training rows but signals describe {n_rows}")
    if model is None:
        model = build_flow(task, X.shape[1], cfg)
        model.meta.update(_feature_stats(X))
    model.meta["task"] = task
    if scaler is not None:
        model.meta["label_range"] = [scaler.low, scaler.high]
    Xs = prepare_features(model, X)

    rng = np.random.default_rng(cfg.seed)
    state = AdamState(model.params.total_dim, cfg.lr0, cfg.beta1, cfg.beta2, cfg.eps, cfg.decay)
    stopper = EarlyStopper(cfg.stop_window, cfg.stop_rel_tol, cfg.min_epochs)
    cap = GradientCap(cfg.clip_factor)
    result = RunResult(method=method, seed=cfg.seed)
    sample = {}
    objective = make_objective(model, signals, cfg.penalty, record=lambda cols: sample.__setitem__("cols", cols))

    for epoch in range(1, cfg.max_epochs + 1):
        z = rng.standard_normal((cfg.train_samples, X.shape[0], model.label_dim))
        tape = Tape()
        try:
            loss = tape.forward(objective, model.params, Xs, z)
            grad = tape.backward()
            if not np.isfinite(grad).all():
                raise FloatingPointError("non-finite gradient")
            adam_step(model.params, cap(grad), state)
        except FloatingPointError as exc:
            raise TrainingAborted(epoch, model, exc) from exc
        state.end_epoch()
        Y = np.hstack([dc.value_of(c) for c in sample["cols"]])
        result.loss_trace.append(loss)
        result.violation_trace.append(violation_report(Y, signals).weak_total)
        result.epochs = epoch
        # the prior term -log N(z) does not depend on the parameters; leaving it
        # out of the monitored value keeps fresh-draw noise from ending training
        prior = -float(np.sum(flows.log_normal(z.reshape(-1, model.label_dim)))) / z.shape[0]
        monitored = loss - prior if cfg.penalty.include_nll else loss
        if stopper.update(monitored):
            result.stopped_early = epoch < cfg.max_epochs
            break
    result.wall_s = time.perf_counter() - t0
    logger.info("%s seed=%d: %d epochs, final loss %.6g, %.1fs", method, cfg.seed, result.epochs,
                result.loss_trace[-1], result.wall_s)
    return model, result


def train_llf_wo_nll(X, signals, cfg: TrainConfig = TrainConfig(), **kwargs):
    """Ablation: penalties only, no likelihood term."""
    cfg = replace(cfg, penalty=replace(cfg.penalty, include_nll=False))
    return train_llf(X, signals, cfg, method=kwargs.pop("method", "llf_wo_nll"), **kwargs)


def sample_mean(model: flows.FlowModel, X, n_samples: int = 10, seed=None) -> np.ndarray:
    """Average of generated labels, (N, label_dim), on raw feature rows."""
    return flows.sample_labels(model, prepare_features(model, X), n_samples, rng=np.random.default_rng(seed))


def predict(model: flows.FlowModel, X, n_samples: int = 10, task: str | None = None, seed=None) -> np.ndarray:
    """Classification: 0/1 by argmax of the sample mean (ties positive).
    Regression: sample mean clamped to [0, 1], mapped back to the raw label range."""
    task = task or model.meta.get("task")
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if seed is None:
        seed = [model.seed or 0, 1]
    mean = sample_mean(model, X, n_samples, seed)
    if task == "classification":
        return (mean[:, 1] >= mean[:, 0]).astype(np.float64)
    y = np.clip(mean[:, 0], 0.0, 1.0)
    if "label_range" in model.meta:
        y = denormalize_labels(y, LabelScaler(*model.meta["label_range"]))
    return y


def evaluate(preds, gold, task: str) -> float:
    """Accuracy in percent, or RMSE."""
    preds = np.asarray(preds, dtype=np.float64)
    gold = np.asarray(gold, dtype=np.float64)
    if preds.shape != gold.shape:
        raise ValueError(f"prediction shape {preds.shape} != gold shape {gold.shape}")
    if task == "classification":
        return float(100.0 * np.mean(preds == gold))
    if task == "regression":
        return float(np.sqrt(np.mean((preds - gold) ** 2)))
    raise ValueError(f"unknown task {task!r}")


def soft_targets(mean: np.ndarray) -> np.ndarray:
    """Clip sample means to [0, 1] and renormalize rows onto the simplex."""
    p = np.clip(mean, 0.0, 1.0)
    s = p.sum(axis=1, keepdims=True)
    return np.where(s > 0, p / np.where(s > 0, s, 1.0), 0.5)


class TwoLayerClassifier:
    """tanh MLP with a softmax output, trained on soft targets."""

    def __init__(self, x_dim: int, hidden: int = 512, n_classes: int = 2, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = dc.ParamStore()
        for k, (a, b) in enumerate(((x_dim, hidden), (hidden, n_classes))):
            self.params.add(f"{k}.W", rng.normal(0.0, np.sqrt(2.0 / (a + b)), size=(a, b)))
            self.params.add(f"{k}.b", np.zeros((1, b)))
        self.x_mean = np.zeros(x_dim)
        self.x_std = np.ones(x_dim)

    def _logits(self, P, x):
        h = dc.linear(x, P["0.W"], P["0.b"], activation="tanh")
        return dc.linear(h, P["1.W"], P["1.b"])

    def fit(self, X, targets, epochs: int = 200, lr: float = 1e-3) -> list[float]:
        X = np.asarray(X, dtype=np.float64)
        stats = _feature_stats(X)
        self.x_mean, self.x_std = np.asarray(stats["x_mean"]), np.asarray(stats["x_std"])
        Xs = (X - self.x_mean) / self.x_std
        targets = np.asarray(targets, dtype=np.float64)
        state = AdamState(self.params.total_dim, lr, decay=1.0)
        n = X.shape[0]

        def loss_fn(P, x, t):
            return dc.mul(dc.sum(dc.mul(t, dc.log_softmax(self._logits(P, x), axis=1))), -1.0 / n)

        trace = []
        for _ in range(epochs):
            tape = Tape()
            trace.append(tape.forward(loss_fn, self.params, Xs, targets))
            adam_step(self.params, tape.backward(), state)
        return trace

    def predict_proba(self, X) -> np.ndarray:
        Xs = (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std
        return np.exp(dc.log_softmax(self._logits(dict(self.params.items()), Xs), axis=1))

    def predict(self, X) -> np.ndarray:
        p = self.predict_proba(X)
        return (p[:, 1] >= p[:, 0]).astype(np.float64)


def train_two_stage(model: flows.FlowModel, X_train, cfg: TrainConfig = TrainConfig(),
                    epochs: int = 200, hidden: int = 512) -> TwoLayerClassifier:
    """LLF-TS: fit a downstream classifier on the flow's soft training labels."""
    targets = soft_targets(sample_mean(model, X_train, cfg.predict_samples, seed=[cfg.seed, 2]))
    clf = TwoLayerClassifier(np.shape(X_train)[1], hidden, seed=cfg.seed)
    clf.fit(X_train, targets, epochs=epochs, lr=cfg.lr0)
    return clf
