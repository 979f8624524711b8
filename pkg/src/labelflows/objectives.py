"""Penalty losses for label constraints, the likelihood term and violation reports.

All loss functions accept label columns as arrays or tape nodes and sum over
the whole batch, so the weak-signal constraints see the full training set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .flows import log_normal
from .weaksig import ClassificationSignals, RegressionRuleSignals


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty weights: box low/high (1, 2), simplex or group means (3), weak signals (4)."""

    lam1: float = 10.0
    lam2: float = 10.0
    lam3: float = 10.0
    lam4: float = 10.0
    include_nll: bool = True
    literal_box: bool = False

    def __post_init__(self):
        for name in ("lam1", "lam2", "lam3", "lam4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


def _split_columns(Y, dim):
    if isinstance(Y, (list, tuple)):
        return list(Y)
    if isinstance(Y, dc.Node):
        if dim != 1 or Y.shape[1:] != (1,):
            raise ValueError(f"a single tape node can only carry one (N, 1) column, got {Y.shape}")
        return [Y]
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[1] != dim:
        raise ValueError(f"expected {dim} label columns, got shape {Y.shape}")
    return [Y[:, [j]] for j in range(dim)]


def box_penalty(col, cfg: PenaltyConfig):
    """Squared distance outside [0, 1].  ``literal_box`` applies the alternative
    reading ``[y]_+^2 + [1 - y]_+^2`` instead."""
    if cfg.literal_box:
        low, high = dc.hinge(col), dc.hinge(dc.sub(1.0, col))
    else:
        low, high = dc.hinge(dc.neg(col)), dc.hinge(dc.sub(col, 1.0))
    return dc.add(dc.mul(cfg.lam1, dc.sum(dc.square(low))), dc.mul(cfg.lam2, dc.sum(dc.square(high))))


def weak_signal_slack(Y, signals: ClassificationSignals):
    """Expected disagreement with each labeler minus its allowance, shape (M, 2).

    Entry (m, j) is  sum_{i: q_im voted} (1 - y_ij) q_imj + y_ij (1 - q_imj)  -  N_m b_mj.
    """
    cols = _split_columns(Y, 2)
    coverage = signals.coverage.astype(np.float64)
    out = []
    for j in (0, 1):
        qj = signals.class_votes(j)
        # sum_i w_i q_ij + y_ij w_i (1 - 2 q_ij), w = vote mask
        const = qj.sum(axis=0) - coverage * signals.bounds[:, j]
        A = np.where(signals.mask, 1.0 - 2.0 * qj, 0.0)
        out.append(dc.add(dc.matmul(A.T, cols[j]), const[:, None]))
    return out


def classification_penalty(Y, signals: ClassificationSignals, cfg: PenaltyConfig = PenaltyConfig()):
    cols = _split_columns(Y, 2)
    if dc.value_of(cols[0]).shape[0] != signals.n_samples:
        raise ValueError(f"{dc.value_of(cols[0]).shape[0]} label rows but {signals.n_samples} signal rows")
    total = dc.add(box_penalty(cols[0], cfg), box_penalty(cols[1], cfg))
    simplex = dc.sum(dc.square(dc.sub(dc.add(cols[0], cols[1]), 1.0)))
    total = dc.add(total, dc.mul(cfg.lam3, simplex))
    for slack in weak_signal_slack(cols, signals):
        total = dc.add(total, dc.mul(cfg.lam4, dc.sum(dc.square(dc.hinge(slack)))))
    return total


def group_mean_gaps(y, rules: RegressionRuleSignals):
    """(mean over group - estimate) per rule and group, shape (2R, 1)."""
    col = _split_columns(y, 1)[0]
    n = dc.value_of(col).shape[0]
    if rules.masks.shape != (rules.n_rules, n):
        raise ValueError(f"rule masks have shape {rules.masks.shape}, labels have {n} rows")
    # rows 2m, 2m+1 average over group 1 and group 2 of rule m
    avg = np.empty((2 * rules.n_rules, n))
    target = np.empty((2 * rules.n_rules, 1))
    for m, (rule, mask) in enumerate(zip(rules.rules, rules.masks)):
        for g, (rows, est) in enumerate(((mask, rule.high), (~mask, rule.low))):
            if not rows.any():
                raise ValueError(f"rule on feature {rule.feature} has an empty group")
            avg[2 * m + g] = rows / rows.sum()
            target[2 * m + g] = est
    return dc.sub(dc.matmul(avg, col), target)


def regression_penalty(y, rules: RegressionRuleSignals, cfg: PenaltyConfig = PenaltyConfig()):
    col = _split_columns(y, 1)[0]
    total = box_penalty(col, cfg)
    if rules.n_rules:
        total = dc.add(total, dc.mul(cfg.lam3, dc.sum(dc.square(group_mean_gaps(col, rules)))))
    return total


def nll_term(z: np.ndarray, logdet):
    """``-sum_i (log N(z_i) - logdet_i)``; only the logdet part depends on the flow."""
    const = -float(np.sum(log_normal(z)))
    return dc.add(dc.sum(logdet), const)


@dataclass
class ViolationReport:
    """Unweighted constraint violations of one label sample."""

    slack: np.ndarray
    box_low: float
    box_high: float
    simplex: float

    @property
    def weak_total(self) -> float:
        """Summed positive slack of the weak-signal constraints."""
        return float(np.maximum(self.slack, 0.0).sum())

    @property
    def total(self) -> float:
        return self.weak_total + self.box_low + self.box_high + self.simplex

    @property
    def feasible(self) -> bool:
        return self.total == 0.0


def violation_report(Y, signals) -> ViolationReport:
    """Classification: slack is (M, 2) as in :func:`weak_signal_slack`.
    Regression: slack is the absolute group-mean gap per rule/group, (R, 2)."""
    Y = np.asarray(dc.value_of(Y) if not isinstance(Y, (list, tuple)) else np.hstack([dc.value_of(c) for c in Y]))
    if Y.ndim == 1:
        Y = Y[:, None]
    box_low = float(np.maximum(-Y, 0.0).sum())
    box_high = float(np.maximum(Y - 1.0, 0.0).sum())
    if isinstance(signals, ClassificationSignals):
        slack = np.hstack([np.asarray(s) for s in weak_signal_slack(Y, signals)])
        simplex = float(np.abs(Y.sum(axis=1) - 1.0).sum())
    else:
        gaps = np.asarray(group_mean_gaps(Y, signals)) if signals.n_rules else np.zeros((0, 1))
        slack = np.abs(gaps).reshape(-1, 2)
        simplex = 0.0
    return ViolationReport(slack, box_low, box_high, simplex)
