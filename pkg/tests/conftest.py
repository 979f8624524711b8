import numpy as np
import pytest

from labelflows import data as data_mod
from labelflows.diffcore import ParamStore, Tape


def numeric_grad(fn, params: ParamStore, inputs=(), h: float = 1e-5) -> np.ndarray:
    """Central differences of ``Tape().forward(fn, params, *inputs)`` over ``params.flat``."""
    base = params.flat.copy()
    out = np.empty_like(base)
    for k in range(base.size):
        for sign in (1, -1):
            p = base.copy()
            p[k] += sign * h
            params.flat = p
            val = Tape().forward(fn, params, *inputs)
            out[k] = val if sign == 1 else (out[k] - val) / (2 * h)
    params.flat = base
    return out


def analytic_grad(fn, params: ParamStore, inputs=()) -> np.ndarray:
    tape = Tape()
    tape.forward(fn, params, *inputs)
    return tape.backward()


def max_rel_error(a, b, floor: float = 1e-6) -> float:
    """Largest |a - b| / max(|a|, |b|, floor); the floor absorbs exact zeros."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


# acceptance verdict lines, keyed by criterion number
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])


@pytest.fixture(scope="session")
def breast_cancer_split():
    d = data_mod.breast_cancer()
    return d.with_splits(data_mod.random_split(len(d), (4, 3, 3), seed=0))
