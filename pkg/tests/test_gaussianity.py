import math

import numpy as np
import pytest
from scipy import stats as sps

from isingline.exact import exact_distribution
from isingline.gaussianity import (ConvergenceRow, ConvergenceTable, GaussianityError, cf_report,
                                   cumulant_diagnostics, default_r_grid, default_z_grid, empirical_cf,
                                   gaussian_convergence_sweep, kurtosis_trend, newman_bound_check, power_sums)
from isingline.lattice import ModelParams, critical_beta
from isingline.observables import LineSampleSet


def test_empirical_cf_of_normal():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(40_000)
    for z in (0.5, 1.0, 2.0):
        est = empirical_cf(x, z)
        assert abs(est.value.real - math.exp(-z * z / 2)) < 5 * est.err_real
        assert abs(est.value.imag) < 5 * est.err_imag
    assert empirical_cf(x, 0.0).value == 1
    with pytest.raises(GaussianityError, match="at least"):
        empirical_cf(x[:50], 1.0)


def test_cf_report_gaussian_vs_rademacher():
    rng = np.random.default_rng(1)
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    g = rng.multivariate_normal([0, 0], cov, size=30_000)
    rep = cf_report(g)
    assert rep.consistent() and rep.max_abs_gap < 0.03
    r = rng.choice([-1.0, 1.0], size=(30_000, 1))
    bad = cf_report(r)
    # cos(2) against exp(-2)
    assert bad.max_abs_gap == pytest.approx(abs(math.cos(2) - math.exp(-2)), abs=0.03)
    assert not bad.consistent()


def test_default_grids():
    assert default_z_grid(1).shape == (4, 1)
    assert default_z_grid(2).shape == (16 + 4, 2)
    assert default_r_grid(2).shape == (16, 2)
    big = default_r_grid(6)
    assert big.shape == (5, 6) and np.all(big >= 0)


def test_newman_exact_on_ising_blocks():
    p = ModelParams.lattice_units(critical_beta(), 0.1)
    configs, prob = exact_distribution(p, (3, 4))
    # column sums are increasing functions of the spins
    u = configs.reshape(-1, 3, 4).sum(axis=2).astype(float)
    rep = newman_bound_check(u, weights=prob)
    assert rep.passed and np.all(rep.slack >= -1e-12)
    assert rep.meta["exact"]


def test_newman_detects_anticorrelated_input():
    x = np.array([[1.0, -1.0], [-1.0, 1.0]])
    rep = newman_bound_check(x, r_values=[[1.0, 1.0]], weights=[0.5, 0.5])
    assert not rep.passed


def test_newman_sampled_independent_columns():
    rng = np.random.default_rng(3)
    u = rng.standard_normal((20_000, 3))
    rep = newman_bound_check(u, n_blocks=40)
    assert rep.passed
    groups = np.repeat(np.arange(10_000), 2)
    rep2 = newman_bound_check(u, n_blocks=40, groups=groups)
    assert rep2.meta["n_blocks"] == 40
    with pytest.raises(GaussianityError):
        newman_bound_check(u, r_values=[[1.0, 1.0]])


def test_cumulants_match_scipy_kstats():
    rng = np.random.default_rng(4)
    x = rng.exponential(size=50_000)
    c = cumulant_diagnostics(x, n_blocks=50)
    k2, k3, k4 = (sps.kstat(x, n) for n in (2, 3, 4))
    assert c.variance == pytest.approx(k2, rel=1e-10)
    assert c.skewness == pytest.approx(k3 / k2 ** 1.5, rel=1e-8)
    assert c.excess_kurtosis == pytest.approx(k4 / k2 ** 2, rel=1e-8)
    # exponential: skewness 2, excess kurtosis 6
    assert abs(c.skewness - 2) < 5 * c.skewness_err
    assert abs(c.excess_kurtosis - 6) < 5 * c.excess_kurtosis_err


def test_integer_power_sums_agree_with_samples():
    rng = np.random.default_rng(5)
    s = rng.integers(-30, 31, size=(4000, 8)).astype(np.int64) + 250
    sums = np.stack([np.full(s.shape[0], s.shape[1]), s.sum(1), (s ** 2).sum(1), (s ** 3).sum(1), (s ** 4).sum(1)],
                    axis=1)
    a = cumulant_diagnostics(sums=sums, n_blocks=40)
    b = cumulant_diagnostics(s.ravel(), n_blocks=40)
    assert a.mean == pytest.approx(b.mean, rel=1e-12)
    for f in ("variance", "skewness", "excess_kurtosis"):
        assert getattr(a, f) == pytest.approx(getattr(b, f), rel=1e-9, abs=1e-12)
    assert power_sums([2.0]).tolist() == [[1, 2, 4, 8, 16]]


def test_cumulant_errors():
    with pytest.raises(GaussianityError, match="exactly one"):
        cumulant_diagnostics()
    with pytest.raises(GaussianityError, match="at least"):
        cumulant_diagnostics(np.arange(10.0))
    with pytest.raises(GaussianityError, match="zero variance"):
        cumulant_diagnostics(np.ones(5000))


def test_rademacher_sums_approach_gaussian():
    rng = np.random.default_rng(6)
    sets = {}
    for n in (1, 4, 16):
        x = rng.choice([-1, 1], size=(20_000, n)).sum(1) / math.sqrt(n)
        sets[n] = LineSampleSet([0.0], n, 1.0, x, one_point=0.0)
    table = gaussian_convergence_sweep(sets, n_blocks=40)
    ks = [r.cumulants.excess_kurtosis for r in table.rows]
    # excess kurtosis of a normalized sum of n signs is -2/n
    for n, k, r in zip((1, 4, 16), ks, table.rows):
        assert abs(k + 2 / n) < 5 * r.cumulants.excess_kurtosis_err + 1e-9
    assert table.kurtosis_monotone and table.final_kurtosis_below(0.2)


def _row(L, k, e):
    c = cumulant_diagnostics(np.random.default_rng(0).standard_normal(2000))
    c.excess_kurtosis, c.excess_kurtosis_err = k, e
    return ConvergenceRow(L, c, None, None)


def test_kurtosis_trend_logic():
    ok, steps = kurtosis_trend([_row(16, 2.0, 0.1), _row(32, 1.0, 0.1), _row(64, 1.1, 0.1)])
    assert ok and steps[1] == pytest.approx(0.1 / math.hypot(0.1, 0.1))
    bad, _ = kurtosis_trend([_row(16, 1.0, 0.1), _row(32, 2.0, 0.1)])
    assert not bad
    t = ConvergenceTable([_row(128, 0.15, 0.06)], True, [])
    assert t.final_kurtosis_below(0.1)
    t = ConvergenceTable([_row(128, 0.26, 0.01)], True, [])
    assert not t.final_kurtosis_below(0.1)
