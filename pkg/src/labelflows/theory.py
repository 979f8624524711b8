"""Numerical check of the dequantization lower bound on 1-dim label densities.

For a density p on the real line and a region Omega* = [a, b], Jensen gives

    E_{U(Omega*)}[log p]  <=  log( (1/|Omega*|) * int_{Omega*} p )  =  log q - log|Omega*|.

The stronger form ``M * log q`` with ``M = max 1/|Omega*_i|`` is also computed
but only reported: a uniform density on a region narrower than 1 breaks it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from . import flows

QUAD_ABS_TOL = 1e-8
QUAD_RANGE = (-50.0, 50.0)
JENSEN_SLACK = 1e-9


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class ConstrainedRegion:
    """Disjoint label intervals ``[lower_i, upper_i]``, one per sample."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if lo.shape != hi.shape or lo.ndim != 1 or lo.size == 0:
            raise ValueError("lower and upper must be equal-length, nonempty 1-d sequences")
        if not (hi > lo).all():
            raise ValueError("every interval needs upper > lower")
        order = np.argsort(lo)
        if (lo[order][1:] < hi[order][:-1]).any():
            raise ValueError("intervals must be pairwise disjoint")
        object.__setattr__(self, "lower", tuple(lo.tolist()))
        object.__setattr__(self, "upper", tuple(hi.tolist()))

    @classmethod
    def single(cls, a: float, b: float) -> "ConstrainedRegion":
        return cls((a,), (b,))

    def __len__(self) -> int:
        return len(self.lower)

    @property
    def volumes(self) -> np.ndarray:
        return np.subtract(self.upper, self.lower)

    @property
    def M(self) -> float:
        return float(np.max(1.0 / self.volumes))

    def interval(self, i: int = 0) -> tuple[float, float]:
        return self.lower[i], self.upper[i]


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    q: float
    jensen_rhs: float
    printed_rhs: float

    @property
    def jensen_ok(self) -> bool:
        return self.lhs <= self.jensen_rhs + JENSEN_SLACK

    @property
    def printed_ok(self) -> bool:
        return self.lhs <= self.printed_rhs + JENSEN_SLACK

    def as_row(self) -> dict:
        return {**asdict(self), "jensen_ok": self.jensen_ok, "printed_ok": self.printed_ok}


def log_density(model, x=None) -> Callable[[np.ndarray], np.ndarray]:
    """Vectorized ``y -> log p(y | x)`` for a 1-dim flow, or pass a callable through."""
    if callable(model) and not isinstance(model, flows.FlowModel):
        return model
    if model.label_dim != 1:
        raise ValueError(f"need a 1-dim flow, got label_dim={model.label_dim}")
    x = np.asarray(x, dtype=np.float64).reshape(1, model.x_dim)

    def f(y):
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        return flows.log_prob(model, np.repeat(x, y.size, axis=0), y.reshape(-1, 1))

    return f


def _quad(fn, a: float, b: float) -> float:
    value, err = integrate.quad(lambda t: float(fn(t)[0]), a, b, epsabs=1e-10, epsrel=1e-10, limit=200)
    if not np.isfinite(value) or err > QUAD_ABS_TOL:
        raise QuadratureError(f"quadrature on [{a}, {b}] did not converge (estimate {value}, error {err:.3g})")
    return float(value)


def _check_range(a: float, b: float) -> None:
    if a < QUAD_RANGE[0] or b > QUAD_RANGE[1]:
        raise ValueError(f"region [{a}, {b}] leaves the quadrature range {QUAD_RANGE}")


def relation_q(model, x, region: ConstrainedRegion, i: int = 0) -> float:
    """Probability mass ``int_{Omega*_i} p(y | x) dy``."""
    a, b = region.interval(i)
    _check_range(a, b)
    logp = log_density(model, x)
    return _quad(lambda t: np.exp(logp(t)), a, b)


def check_bound(model, x, region: ConstrainedRegion, i: int = 0) -> BoundCheck:
    """Evaluate both sides of the bound for interval ``i``; ``model`` may be a log-density callable."""
    a, b = region.interval(i)
    _check_range(a, b)
    logp = log_density(model, x)
    width = b - a
    lhs = _quad(logp, a, b) / width
    q = _quad(lambda t: np.exp(logp(t)), a, b)
    log_q = np.log(q) if q > 0 else -np.inf
    return BoundCheck(float(lhs), q, float(log_q - np.log(width)), float(region.M * log_q))


def uniform_log_density(a: float, b: float):
    """log of the uniform density on [a, b]; -inf outside."""
    inside = -np.log(b - a)

    def f(y):
        y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        return np.where((y >= a) & (y <= b), inside, -np.inf)

    return f


def uniform_instance(width: float = 0.1) -> BoundCheck:
    """Jensen holds with equality; the stronger form fails whenever width < 1."""
    region = ConstrainedRegion.single(0.0, width)
    return check_bound(uniform_log_density(0.0, width), None, region)


def random_instance(rng: np.random.Generator, x_dim: int = 3) -> tuple[flows.FlowModel, np.ndarray, ConstrainedRegion]:
    """A small 1-dim flow with perturbed weights, a feature row and a region near its mode."""
    model = flows.affine_flow(x_dim, n_layers=int(rng.integers(1, 4)), hidden=8, seed=None)
    model.params.flat = rng.normal(0.0, 0.3, model.params.total_dim)
    x = rng.standard_normal(x_dim)
    centre, _ = flows.generate(model, x[None, :], rng.standard_normal((1, 1)))
    width = float(rng.uniform(0.05, 3.0))
    a = float(centre[0, 0]) - width * float(rng.uniform(0.0, 1.0))
    return model, x, ConstrainedRegion.single(a, a + width)


def theorem_check(n_random: int = 50, seed: int = 0) -> list[dict]:
    """Rows ``{instance, lhs, q, jensen_rhs, printed_rhs, jensen_ok, printed_ok}``;
    instance 0 is the width-0.1 uniform construction."""
    rows = [{"instance": 0, **uniform_instance(0.1).as_row()}]
    rng = np.random.default_rng(seed)
    for k in range(1, n_random + 1):
        model, x, region = random_instance(rng)
        rows.append({"instance": k, **check_bound(model, x, region).as_row()})
    return rows
