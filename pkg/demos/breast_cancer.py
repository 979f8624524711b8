"""Weak signals from three single-feature labelers on Breast Cancer, then LLF vs AVG on one split.

Takes about three minutes on one core.
"""
import numpy as np

from labelflows import data, weaksig
from labelflows.objectives import violation_report
from labelflows.trainer import TrainConfig, evaluate, predict, train_llf

ds = data.breast_cancer()
ds = ds.with_splits(data.random_split(len(ds), (4, 3, 3), seed=10))
signals = weaksig.synth_classification_signals(ds, [0, 1, 7])
print("error bounds per labeler (class 0, class 1):")
print(np.round(signals.bounds, 3))

train_idx, test_idx = ds.indices("train"), ds.indices("test")
X_train, _ = ds.part("train")
X_test, y_test = ds.part("test")

avg = weaksig.avg_baseline(signals.subset(test_idx))
print(f"AVG test accuracy {evaluate(avg, y_test, 'classification'):.2f}")

model, result = train_llf(X_train, signals.subset(train_idx), TrainConfig(seed=10))
print(f"trained {result.epochs} epochs; weak-signal violation "
      f"{result.violation_trace[0]:.1f} -> {result.violation_trace[-1]:.3f}")
print(f"LLF test accuracy {evaluate(predict(model, X_test), y_test, 'classification'):.2f}")

train_pred = predict(model, X_train)
onehot = np.c_[1 - train_pred, train_pred]
print("slack of hard LLF training labels per labeler/class:")
print(np.round(violation_report(onehot, signals.subset(train_idx)).slack, 2))
