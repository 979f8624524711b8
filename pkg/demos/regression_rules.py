"""Threshold rules on a synthetic linear target: LLF vs the rule-average baseline."""
from labelflows import data, weaksig
from labelflows.trainer import TrainConfig, evaluate, predict, train_llf, train_llf_wo_nll

ds = data.linear_regression_data()
ds = ds.with_splits(data.random_split(len(ds), (4, 3, 3), seed=0))
scaler = weaksig.LabelScaler.fit(ds.part("sim")[1])
rules = weaksig.synth_regression_rules(ds, [0, 1, 2, 3, 4], scaler)
for r in rules:
    print(f"x{r.feature} >= {r.threshold:+.3f}: mean {r.high:.3f} above, {r.low:.3f} below (normalized)")

X_train, _ = ds.part("train")
X_test, y_test = ds.part("test")
signals = weaksig.RegressionRuleSignals.on(rules, X_train)

avg = weaksig.denormalize_labels(weaksig.avg_baseline(rules, X_test), scaler)
print(f"AVG RMSE {evaluate(avg, y_test, 'regression'):.3f}")
for name, fit in (("LLF", train_llf), ("LLF w/o nll", train_llf_wo_nll)):
    model, result = fit(X_train, signals, TrainConfig(seed=0), scaler=scaler)
    rmse = evaluate(predict(model, X_test), y_test, "regression")
    print(f"{name} RMSE {rmse:.3f} after {result.epochs} epochs")
