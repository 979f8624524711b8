import numpy as np
import pytest
from scipy import stats

from labelflows import flows, theory
from labelflows.theory import ConstrainedRegion


def standard_normal_flow():
    model = flows.affine_flow(2, n_layers=1, hidden=4, seed=None)
    model.params.flat = np.zeros(model.params.total_dim)
    return model


def test_uniform_region_gives_jensen_equality():
    check = theory.uniform_instance(0.1)
    assert check.lhs == pytest.approx(np.log(10.0), abs=1e-9)
    assert check.q == pytest.approx(1.0, abs=1e-9)
    assert check.jensen_rhs == pytest.approx(np.log(10.0), abs=1e-9)
    assert check.jensen_ok
    # M * log q = 10 * log 1 = 0 < log 10
    assert not check.printed_ok


def test_standard_normal_strict_inequality():
    check = theory.check_bound(standard_normal_flow(), np.zeros(2), ConstrainedRegion.single(-1.0, 1.0))
    grid = np.linspace(-1, 1, 200001)
    lhs = np.trapezoid(stats.norm.logpdf(grid), grid) / 2.0
    assert check.lhs == pytest.approx(lhs, abs=1e-8)
    assert check.q == pytest.approx(stats.norm.cdf(1) - stats.norm.cdf(-1), abs=1e-10)
    assert check.lhs < check.jensen_rhs - 1e-3


def test_full_support_mass_is_one():
    rng = np.random.default_rng(0)
    model, x, _ = theory.random_instance(rng)
    assert theory.relation_q(model, x, ConstrainedRegion.single(-50.0, 50.0)) == pytest.approx(1.0, abs=1e-3)


def test_mass_vanishes_with_width():
    model = standard_normal_flow()
    qs = [theory.relation_q(model, np.zeros(2), ConstrainedRegion.single(0.0, w)) for w in (1e-1, 1e-3, 1e-6)]
    assert qs[0] > qs[1] > qs[2]
    assert qs[2] < 1e-6


def test_mass_matches_monte_carlo():
    rng = np.random.default_rng(3)
    model, x, region = theory.random_instance(rng)
    q = theory.relation_q(model, x, region)
    n = 100_000
    y, _ = flows.generate(model, np.repeat(x[None, :], n, axis=0), rng.standard_normal((n, 1)))
    a, b = region.interval()
    hits = np.mean((y[:, 0] >= a) & (y[:, 0] <= b))
    se = np.sqrt(max(hits * (1 - hits), 1e-12) / n)
    assert abs(hits - q) < 3 * se + 1e-12


def test_mass_monotone_in_nested_regions():
    rng = np.random.default_rng(4)
    model, x, region = theory.random_instance(rng)
    a, b = region.interval()
    mid = 0.5 * (a + b)
    qs = [theory.relation_q(model, x, ConstrainedRegion.single(mid - h, mid + h)) for h in (0.1, 0.5, 1.0, 3.0)]
    assert all(p <= q for p, q in zip(qs, qs[1:]))


def test_theorem_check_table():
    rows = theory.theorem_check(n_random=50, seed=0)
    assert len(rows) == 51
    assert rows[0]["instance"] == 0 and rows[0]["lhs"] == pytest.approx(rows[0]["jensen_rhs"], abs=1e-9)
    assert all(r["jensen_ok"] for r in rows)
    assert all(r["lhs"] - r["jensen_rhs"] <= 1e-9 for r in rows)
    assert rows == theory.theorem_check(n_random=50, seed=0)


def test_region_validation():
    with pytest.raises(ValueError):
        ConstrainedRegion((0.0,), (0.0,))
    with pytest.raises(ValueError):
        ConstrainedRegion((0.0, 0.5), (1.0, 2.0))
    region = ConstrainedRegion((0.0, 2.0), (0.5, 2.25))
    assert region.M == pytest.approx(4.0)
    np.testing.assert_allclose(region.volumes, [0.5, 0.25])
    with pytest.raises(ValueError):
        theory.relation_q(standard_normal_flow(), np.zeros(2), ConstrainedRegion.single(40.0, 60.0))


def test_two_dim_flow_rejected():
    with pytest.raises(ValueError):
        theory.log_density(flows.coupling_flow(2, n_steps=1, hidden=4), np.zeros(2))
