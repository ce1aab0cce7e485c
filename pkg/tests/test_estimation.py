import numpy as np
import pytest

from gridse.grid import Bus, BusKind, Network, StateVector
from gridse.measurement import (FormStack, MeasurementSet, MeasurementSpec, MeasurementType,
                                full_plan, simulate_measurements)
from gridse.estimation import (EstimationError, EstimatorOptions, bad_data_loop,
                               critical_measurements, lav_prox_linear, wls_gauss_newton)

from conftest import random_state

ESTIMATORS = [wls_gauss_newton, lav_prox_linear]


def _truth(rng, n):
    v = random_state(rng, n, spread=0.05)
    # pin the reference angle to zero
    return StateVector.from_complex(v.complex * np.exp(-1j * np.angle(v.complex[0])))


@pytest.mark.parametrize("est", ESTIMATORS)
def test_noise_free_recovery(case14, est):
    rng = np.random.default_rng(0)
    plan = full_plan(case14.net)
    stack = FormStack.build(case14.net, plan)
    truth = _truth(rng, 14)
    ms = simulate_measurements(case14.net, truth, plan, noise=False, stack=stack)
    rep = est(ms, stack)
    assert rep.converged
    assert np.max(np.abs(rep.v_hat.complex - truth.complex)) < 1e-6


@pytest.mark.parametrize("est", ESTIMATORS)
def test_start_at_truth_stays(case6, est):
    plan = full_plan(case6.net)
    stack = FormStack.build(case6.net, plan)
    truth = _truth(np.random.default_rng(1), 6)
    ms = simulate_measurements(case6.net, truth, plan, noise=False, stack=stack)
    rep = est(ms, stack, EstimatorOptions(init=truth))
    assert rep.converged and rep.iterations <= 2
    assert np.allclose(rep.v_hat.complex, truth.complex, atol=1e-12)


@pytest.mark.parametrize("est", ESTIMATORS)
def test_unobservable_set_is_rejected(case6, est):
    specs = [MeasurementSpec(MeasurementType.VMAG_SQ, k) for k in range(1, 7)]
    ms = MeasurementSet(specs, np.ones(6))
    with pytest.raises(EstimationError):
        est(ms, FormStack.build(case6.net, specs))


@pytest.mark.parametrize("est", ESTIMATORS)
def test_single_bus_magnitude(est):
    net = Network((Bus(1, BusKind.SLACK),))
    spec = MeasurementSpec(MeasurementType.VMAG_SQ, 1)
    rep = est(MeasurementSet([spec], [1.21]), FormStack.build(net, [spec]))
    assert rep.v_hat.vr[0] == pytest.approx(1.1, abs=1e-6)
    assert rep.v_hat.vi[0] == 0.0


@pytest.mark.parametrize("est", ESTIMATORS)
def test_objective_never_increases(case14, est):
    plan = full_plan(case14.net)
    stack = FormStack.build(case14.net, plan)
    ms = simulate_measurements(case14.net, _truth(np.random.default_rng(2), 14), plan, seed=2,
                               stack=stack)
    rep = est(ms, stack)
    tr = np.array(rep.objective_trace)
    assert np.all(np.diff(tr) <= 1e-12 * tr[0])


def test_noisy_wls_is_close(case14):
    plan = full_plan(case14.net)
    stack = FormStack.build(case14.net, plan)
    truth = _truth(np.random.default_rng(3), 14)
    ms = simulate_measurements(case14.net, truth, plan, seed=3, stack=stack)
    rep = wls_gauss_newton(ms, stack)
    assert rep.converged
    assert np.max(np.abs(rep.v_hat.complex - truth.complex)) < 0.01


@pytest.mark.parametrize("est", ESTIMATORS)
def test_measurement_order_does_not_matter(case6, est):
    plan = full_plan(case6.net)
    truth = _truth(np.random.default_rng(4), 6)
    ms = simulate_measurements(case6.net, truth, plan, seed=4)
    perm = np.random.default_rng(0).permutation(len(plan))
    a = est(ms, FormStack.build(case6.net, plan))
    pms = ms.take(perm)
    b = est(pms, FormStack.build(case6.net, pms.specs))
    assert np.allclose(a.v_hat.complex, b.v_hat.complex, atol=1e-10)


def test_input_length_mismatch(case6):
    plan = full_plan(case6.net)
    ms = MeasurementSet(plan[:-1], np.ones(len(plan) - 1))
    with pytest.raises(ValueError):
        wls_gauss_newton(ms, FormStack.build(case6.net, plan))


def test_options_validation():
    with pytest.raises(ValueError):
        EstimatorOptions(tol=0)


def test_bad_data_clean_set_untouched(case14):
    plan = full_plan(case14.net)
    stack = FormStack.build(case14.net, plan)
    truth = _truth(np.random.default_rng(5), 14)
    ms = simulate_measurements(case14.net, truth, plan, noise=False, stack=stack)
    rep, removed = bad_data_loop(ms, stack)
    assert removed == [] and rep.flagged == ()


def test_bad_data_removes_gross_error(case14):
    # residual/sigma is not leverage-corrected, so pick a low-leverage flow entry
    plan = full_plan(case14.net)
    stack = FormStack.build(case14.net, plan)
    truth = _truth(np.random.default_rng(6), 14)
    ms = simulate_measurements(case14.net, truth, plan, seed=6, stack=stack)
    i = 100
    assert plan[i].mtype is MeasurementType.PF_TERM
    z = ms.z.copy()
    z[i] += 12 * plan[i].sigma
    rep, removed = bad_data_loop(MeasurementSet(ms.specs, z), stack)
    assert removed == [i]
    keep = [k for k in range(len(plan)) if k != i]
    norm = np.abs(rep.residuals[keep]) / ms.sigma[keep]
    assert np.all(norm < 5)


def test_critical_measurement_is_flagged(case2):
    T = MeasurementType
    specs = [MeasurementSpec(T.VMAG_SQ, 1), MeasurementSpec(T.VMAG_SQ, 2), MeasurementSpec(T.P_INJ, 2)]
    stack = FormStack.build(case2.net, specs)
    # 3 unknowns, 3 measurements: every entry is critical
    assert critical_measurements(stack, [s.sigma for s in specs]) == [0, 1, 2]
    truth = StateVector.from_polar([1.0, 0.98], [0.0, -0.03])
    ms = simulate_measurements(case2.net, truth, specs, noise=False, stack=stack)
    z = ms.z.copy()
    z[2] += 12 * specs[2].sigma
    rep, removed = bad_data_loop(MeasurementSet(specs, z), stack)
    assert removed == []
    assert 2 in rep.flagged
