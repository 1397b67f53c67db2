import math

import numpy as np
import pytest

from isingline.exact import enumerate_moments
from isingline.lattice import ModelParams, build_lattice
from isingline.samplers import (ChainState, HookError, Schedule, chain_rng, integrated_autocorrelation,
                                metropolis_sweep, pilot_schedule, run_chain, update)
from isingline.stats import block_sums, default_blocks, jackknife, jackknife_error, leave_one_out, split_blocks


def pair_hook(fld):
    s = fld.spins.reshape(-1).astype(float)
    return np.concatenate([s, np.outer(s, s)[np.triu_indices(s.size, 1)]])


def _check_against_exact(params, extents, bc, schedule, seed, n_sigma=5.0):
    exact = enumerate_moments(params, extents, bc)
    n = exact.one_point.size
    iu = np.triu_indices(n, 1)
    ref = np.concatenate([exact.one_point, exact.two_point[iu]])
    out = run_chain(params, schedule, {"v": pair_hook}, extents=extents, bc=bc, seed=seed)["v"].values
    est, err, _ = jackknife(out, lambda x: x.mean(0), n_blocks=40)
    z = np.abs(est - ref) / np.maximum(err, 1e-3)
    assert z.max() < n_sigma, f"worst deviation {z.max():.2f} sigma"


@pytest.mark.parametrize("sampler", ["metropolis", "heat_bath", "wolff", "compound"])
def test_samplers_reproduce_exact_moments(sampler):
    p = ModelParams.lattice_units(0.44, 0.2)
    sched = Schedule(200, 4000, 2, sampler, 2)
    _check_against_exact(p, (3, 3), "periodic", sched, seed=1)


@pytest.mark.parametrize("sampler", ["metropolis", "wolff"])
def test_samplers_with_plus_boundary(sampler):
    p = ModelParams.lattice_units(0.4, 0.1)
    _check_against_exact(p, (3, 3), "plus", Schedule(200, 4000, 2, sampler, 2), seed=2)


def test_zero_field_wolff_is_symmetric():
    p = ModelParams.lattice_units(0.3, 0.0)
    out = run_chain(p, Schedule(50, 4000, 1, "wolff"), {"m": lambda f: f.magnetization()},
                    extents=(4, 4), seed=4)["m"].values
    est, err, _ = jackknife(out, np.mean, 40)
    assert abs(est) < 5 * err


def test_determinism_and_independent_streams():
    p = ModelParams.lattice_units(0.4, 0.1)
    s = Schedule(10, 50, 1, "compound")
    hook = {"m": lambda f: f.magnetization()}
    a = run_chain(p, s, hook, extents=(6, 6), seed=9)["m"].values
    b = run_chain(p, s, hook, extents=(6, 6), seed=9)["m"].values
    c = run_chain(p, s, hook, extents=(6, 6), seed=9, chain_id=1)["m"].values
    assert np.array_equal(a, b) and not np.array_equal(a, c)
    assert chain_rng(1, 0).integers(1 << 30) != chain_rng(1, 1).integers(1 << 30)


def test_checkpoint_resume_is_bit_identical(tmp_path):
    p = ModelParams.lattice_units(0.44, 0.05)
    s = Schedule(5, 40, 2, "compound")
    hooks = {"m": lambda f: f.magnetization(), "row": lambda f: f.spins[0].sum()}
    full = run_chain(p, s, hooks, extents=(8, 8), seed=3)
    ck = tmp_path / "c.json"
    run_chain(p, s, hooks, extents=(8, 8), seed=3, checkpoint_path=ck, checkpoint_every=10)
    resumed = run_chain(p, s, hooks, resume_from=ck)
    for k in hooks:
        assert np.array_equal(full[k].values, resumed[k].values)


def test_hook_failure_reports_position():
    def bad(f):
        raise RuntimeError("boom")
    with pytest.raises(HookError, match="update 3"):
        run_chain(ModelParams(), Schedule(2, 5), {"bad": bad}, extents=(4, 4))


def test_schedule_validation():
    with pytest.raises(ValueError):
        Schedule(0, 0)
    with pytest.raises(ValueError):
        Schedule(1, 1, sampler="gibbs")
    chain = ChainState.new((4, 4))
    with pytest.raises(ValueError):
        update(chain, ModelParams(), "gibbs")


def test_infinite_temperature_sweeps():
    # every Metropolis proposal is accepted, heat-bath draws fresh fair spins
    chain = ChainState.new((32, 32), seed=0)
    metropolis_sweep(chain, ModelParams.lattice_units(0.0, 0.0))
    assert chain.field.magnetization() == -1.0
    update(chain, ModelParams.lattice_units(0.0, 0.0), "heat_bath")
    assert abs(chain.field.magnetization()) < 0.1


def test_tau_int_iid_and_ar1():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(50_000)
    assert integrated_autocorrelation(x).tau_int == pytest.approx(0.5, abs=0.05)
    rho = 0.8
    y = np.empty(200_000)
    y[0] = 0
    e = rng.standard_normal(y.size)
    for i in range(1, y.size):
        y[i] = rho * y[i - 1] + e[i]
    est = integrated_autocorrelation(y)
    assert est.tau_int == pytest.approx((1 + rho) / (2 * (1 - rho)), rel=0.1)
    assert est.ess == pytest.approx(y.size / (2 * est.tau_int))


def test_tau_int_rejects_bad_input():
    with pytest.raises(ValueError, match="short"):
        integrated_autocorrelation(np.ones(10))
    with pytest.raises(ValueError, match="zero variance"):
        integrated_autocorrelation(np.ones(500))
    with pytest.raises(ValueError, match="non-finite"):
        integrated_autocorrelation(np.r_[np.arange(200.0), np.nan])


def test_pilot_schedule():
    sched, est = pilot_schedule(ModelParams.lattice_units(0.3, 0.1), (8, 8), pilot_length=500, n_measure=10)
    assert sched.stride >= 1 and sched.stride >= math.ceil(2 * est.tau_int) - 1e-9
    assert sched.therm_sweeps >= 10


def test_jackknife_of_mean_matches_standard_error():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(10_000)
    est, err, reps = jackknife(x, np.mean, 100)
    assert est == pytest.approx(x.mean())
    assert err == pytest.approx(x.std(ddof=1) / math.sqrt(x.size), rel=0.02)
    assert reps.shape == (100,)


def test_block_helpers():
    b = block_sums(np.arange(10.0), 3)
    assert np.array_equal(b, [3.0, 12.0, 21.0])
    assert np.array_equal(leave_one_out(b), [33.0, 24.0, 15.0])
    assert list(split_blocks(7, 3)) == [0, 0, 1, 1, 2, 2, -1]
    assert jackknife_error(np.ones((5, 2))).tolist() == [0.0, 0.0]
    assert default_blocks(1000, tau_int=5) == 10
    with pytest.raises(ValueError):
        split_blocks(3, 5)


def test_all_up_start():
    assert build_lattice((3, 3)).magnetization() == 1.0
