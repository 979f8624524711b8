"""Tabular datasets, CSV I/O and train/simulation/test splits."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLIT_NAMES = ("train", "sim", "test")


@dataclass
class TabularDataset:
    """Feature matrix with optional gold labels and named index splits."""

    X: np.ndarray
    y: np.ndarray | None = None
    feature_names: list[str] = field(default_factory=list)
    splits: dict[str, np.ndarray] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise ValueError(f"X must be 2-d, got shape {self.X.shape}")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.float64)
            if self.y.shape != (self.X.shape[0],):
                raise ValueError(f"y has shape {self.y.shape}, expected ({self.X.shape[0]},)")
        if not self.feature_names:
            self.feature_names = [f"x{j}" for j in range(self.X.shape[1])]

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(len(self))
        try:
            return self.splits[split]
        except KeyError:
            raise KeyError(f"dataset has no split {split!r}; known: {sorted(self.splits)}") from None

    def part(self, split: str) -> tuple[np.ndarray, np.ndarray | None]:
        idx = self.indices(split)
        return self.X[idx], None if self.y is None else self.y[idx]

    def with_splits(self, assignment) -> "TabularDataset":
        """Attach splits from a per-row sequence of split names."""
        assignment = np.asarray(assignment)
        if assignment.shape != (len(self),):
            raise ValueError(f"{assignment.size} split labels for {len(self)} rows")
        unknown = set(assignment) - set(SPLIT_NAMES)
        if unknown:
            raise ValueError(f"unknown split names {sorted(unknown)}")
        splits = {name: np.flatnonzero(assignment == name) for name in SPLIT_NAMES}
        return TabularDataset(self.X, self.y, list(self.feature_names), splits, self.name)


def load_csv(path, label_column: str = "label") -> TabularDataset:
    """Read a header-first CSV; a final column named ``label`` holds gold labels."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    values = np.array(rows, dtype=np.float64) if rows else np.zeros((0, len(header)))
    if header and header[-1] == label_column:
        return TabularDataset(values[:, :-1], values[:, -1], header[:-1], name=path.stem)
    return TabularDataset(values, None, header, name=path.stem)


def save_csv(data: TabularDataset, path) -> None:
    header = list(data.feature_names)
    cols = [data.X]
    if data.y is not None:
        header.append("label")
        cols.append(data.y[:, None])
    table = np.hstack(cols)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows([[repr(float(v)) for v in row] for row in table])


def split_sizes(n: int, ratio=(4, 3, 3)) -> tuple[int, ...]:
    """Largest-remainder apportionment of ``n`` rows to the ratio parts."""
    ratio = np.asarray(ratio, dtype=np.float64)
    if ratio.ndim != 1 or (ratio <= 0).any():
        raise ValueError(f"ratio components must be positive, got {ratio.tolist()}")
    if n < len(ratio):
        raise ValueError(f"need at least {len(ratio)} rows to split, got {n}")
    exact = n * ratio / ratio.sum()
    sizes = np.floor(exact).astype(int)
    order = np.argsort(-(exact - sizes), kind="stable")
    sizes[order[: n - sizes.sum()]] += 1
    return tuple(int(s) for s in sizes)


def random_split(n: int, ratio=(4, 3, 3), seed: int = 0) -> np.ndarray:
    """Per-row split names from a seeded shuffle."""
    sizes = split_sizes(n, ratio)
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=object)
    start = 0
    for name, size in zip(SPLIT_NAMES, sizes):
        assignment[perm[start:start + size]] = name
        start += size
    return assignment.astype(str)


def parse_ratio(text: str) -> tuple[float, ...]:
    parts = tuple(float(p) for p in text.split(":"))
    if len(parts) != 3:
        raise ValueError(f"ratio must look like 4:3:3, got {text!r}")
    return parts


def write_split_file(assignment, path) -> None:
    Path(path).write_text("".join(f"{name}\n" for name in assignment))


def read_split_file(path) -> np.ndarray:
    names = [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]
    bad = sorted(set(names) - set(SPLIT_NAMES))
    if bad:
        raise ValueError(f"{path}: unknown split names {bad}")
    return np.array(names)


def breast_cancer() -> TabularDataset:
    """UCI Wisconsin diagnostic breast cancer data as shipped with scikit-learn.

    Label 1 is benign, 0 malignant.
    """
    from sklearn.datasets import load_breast_cancer

    raw = load_breast_cancer()
    names = [n.replace(" ", "_") for n in raw.feature_names]
    return TabularDataset(raw.data, raw.target.astype(np.float64), names, name="breast_cancer")


def linear_regression_data(n: int = 1000, n_features: int = 8, noise: float = 0.3,
                           seed: int = 0) -> TabularDataset:
    """Gaussian features with a noisy linear target, for regression checks."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, n_features))
    w = rng.uniform(0.5, 1.5, n_features) * rng.choice([-1.0, 1.0], n_features)
    y = X @ w + noise * rng.standard_normal(n) + 10.0
    return TabularDataset(X, y, name="synthetic_linear")


BUILTIN = {
    "breast_cancer": breast_cancer,
    "synthetic_regression": linear_regression_data,
}


def load_dataset(source: str) -> TabularDataset:
    """A CSV path or ``builtin:<name>``."""
    if source.startswith("builtin:"):
        key = source.split(":", 1)[1]
        if key not in BUILTIN:
            raise KeyError(f"unknown builtin dataset {key!r}; known: {sorted(BUILTIN)}")
        return BUILTIN[key]()
    return load_csv(source)


def standardize(X: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Z-score ``X`` with the mean/std of ``ref``; zero-variance columns are only centered."""
    mu = ref.mean(axis=0)
    sd = ref.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (X - mu) / sd
