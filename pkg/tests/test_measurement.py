import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridse.grid import Bus, BusKind, Line, Network, NetworkError, StateVector
from gridse.measurement import (DEFAULT_SIGMA, ErrorClass, FormStack, MeasurementSet,
                                MeasurementSpec, MeasurementType, QuadraticForm,
                                build_quadratic_form, classify_error, direct_value, evaluate,
                                full_plan, jacobian_row, observability_check, prefilter,
                                read_measurement_sets, read_plan, simulate_measurements,
                                write_measurement_sets, write_plan)

from conftest import central_diff, random_state

T = MeasurementType


def test_vmag_form_has_two_unit_entries(case6):
    form = build_quadratic_form(case6.net, MeasurementSpec(T.VMAG_SQ, 3))
    h = form.to_dense()
    assert np.count_nonzero(h) == 2
    assert h[4, 4] == 1.0 and h[5, 5] == 1.0


def test_isolated_bus_injection_form_is_zero():
    # bus 1 is the slack of a one-bus network: no line, no shunt
    net = Network((Bus(1, BusKind.SLACK),))
    form = build_quadratic_form(net, MeasurementSpec(T.P_INJ, 1))
    assert not np.any(form.to_dense())


@pytest.mark.parametrize("name", ["case2", "case6", "case14"])
def test_forms_match_direct_evaluation(request, name):
    case = request.getfixturevalue(name)
    net = case.net
    rng = np.random.default_rng(11)
    specs = full_plan(net)
    forms = [build_quadratic_form(net, s) for s in specs]
    for _ in range(25):
        v = random_state(rng, net.n_bus)
        for s, f in zip(specs, forms):
            want = direct_value(net, v, s)
            got = evaluate(f, v)
            assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


def test_forms_are_symmetric(case14):
    for s in full_plan(case14.net):
        h = build_quadratic_form(case14.net, s).to_dense()
        assert np.array_equal(h, h.T)


def test_form_nonzeros_are_local(case14):
    net = case14.net
    spec = MeasurementSpec(T.P_INJ, 5)
    h = build_quadratic_form(net, spec).to_dense()
    neighbours = {5} | {ln.to_bus for ln in net.lines if ln.from_bus == 5} | {
        ln.from_bus for ln in net.lines if ln.to_bus == 5}
    buses = {i // 2 + 1 for i in np.nonzero(h)[0]}
    assert buses <= neighbours


def test_invalid_location_rejected(case6):
    with pytest.raises(NetworkError):
        build_quadratic_form(case6.net, MeasurementSpec(T.P_INJ, 7))
    with pytest.raises(NetworkError):
        build_quadratic_form(case6.net, MeasurementSpec(T.PF_FWD, 99))


def test_evaluate_trivia(case6):
    zero = QuadraticForm.from_dense(np.zeros((12, 12)))
    v = random_state(np.random.default_rng(0), 6)
    assert evaluate(zero, v) == 0.0
    assert not np.any(jacobian_row(zero, v))
    vmag = build_quadratic_form(case6.net, MeasurementSpec(T.VMAG_SQ, 2))
    assert evaluate(vmag, StateVector.flat(6)) == 1.0
    g = jacobian_row(vmag, StateVector.flat(6))
    assert g[2] == 2.0 and np.count_nonzero(g) == 1


def test_evaluate_matches_dense_triple_product():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((8, 8))
    h = a + a.T
    x = rng.standard_normal(8)
    assert evaluate(QuadraticForm.from_dense(h), x) == pytest.approx(x @ h @ x, abs=1e-12)


def test_evaluate_dimension_mismatch():
    with pytest.raises(ValueError):
        evaluate(QuadraticForm.from_dense(np.eye(4)), np.ones(6))


def test_asymmetric_input_is_symmetrized():
    h = np.array([[0.0, 2.0], [0.0, 0.0]])
    f = QuadraticForm.from_dense(h)
    assert np.array_equal(f.to_dense(), [[0.0, 1.0], [1.0, 0.0]])


def test_jacobian_matches_finite_differences(case14):
    rng = np.random.default_rng(2)
    specs = full_plan(case14.net)
    for _ in range(20):
        s = specs[rng.integers(len(specs))]
        f = build_quadratic_form(case14.net, s)
        x = random_state(rng, 14).interleaved()
        fd = central_diff(lambda xx: evaluate(f, xx), x)
        g = jacobian_row(f, x)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(1.0, np.linalg.norm(fd))


def test_stack_matches_single_forms(case14):
    specs = full_plan(case14.net)
    stack = FormStack.build(case14.net, specs)
    v = random_state(np.random.default_rng(4), 14)
    z = stack.evaluate(v)
    jac = stack.jacobian(v)
    for m, f in enumerate(stack.forms):
        assert z[m] == pytest.approx(evaluate(f, v), abs=1e-13)
        assert np.allclose(jac[m], jacobian_row(f, v), atol=1e-13)


def test_simulation_noise_free_and_deterministic(case6):
    specs = full_plan(case6.net)
    v = random_state(np.random.default_rng(0), 6)
    clean = simulate_measurements(case6.net, v, specs, noise=False)
    exact = [direct_value(case6.net, v, s) for s in specs]
    assert np.allclose(clean.z, exact, atol=1e-12)
    a = simulate_measurements(case6.net, v, specs, seed=9)
    b = simulate_measurements(case6.net, v, specs, seed=9)
    assert np.array_equal(a.z, b.z)


def test_simulated_noise_has_requested_std(case2):
    spec = MeasurementSpec(T.P_INJ, 2, 0.01)
    v = StateVector.flat(2)
    stack = FormStack.build(case2.net, [spec] * 1000)
    rng = np.random.default_rng(0)
    draws = np.concatenate([simulate_measurements(case2.net, v, [spec] * 1000, rng, stack=stack).z
                            for _ in range(100)])
    assert np.std(draws) == pytest.approx(0.01, rel=0.02)


@pytest.mark.parametrize("residual, sigma, cls", [
    (0.3, 0.01, ErrorClass.EXTREME),
    (0.07, 0.01, ErrorClass.GROSS),
    (0.0, 0.02, ErrorClass.NORMAL),
    (-0.07, 0.01, ErrorClass.GROSS),
])
def test_classify_examples(residual, sigma, cls):
    assert classify_error(residual, sigma) is cls


def test_classify_rejects_bad_sigma():
    with pytest.raises(ValueError):
        classify_error(1.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False), st.floats(1e-6, 10.0))
def test_classify_is_monotone_in_magnitude(r, sigma):
    order = [ErrorClass.NORMAL, ErrorClass.GROSS, ErrorClass.EXTREME]
    a = order.index(classify_error(r, sigma))
    b = order.index(classify_error(2 * r, sigma))
    assert b >= a


def test_prefilter():
    specs = [MeasurementSpec(T.VMAG_SQ, 1), MeasurementSpec(T.P_INJ, 1), MeasurementSpec(T.VMAG_SQ, 2),
             MeasurementSpec(T.P_INJ, 2), MeasurementSpec(T.VMAG_SQ, 3)]
    limits = {T.VMAG_SQ: (0.64, 1.44), T.P_INJ: (-5.0, 5.0)}
    ms = MeasurementSet(specs, [1.0, 0.5, 1.1, 0.1, 0.9])
    kept, rejected = prefilter(ms, limits)
    assert rejected == [] and np.array_equal(kept.z, ms.z)
    bad = MeasurementSet(specs, [-0.2, 9.0, 1.1, -6.0, 0.9])
    kept, rejected = prefilter(bad, limits)
    assert rejected == [0, 1, 3]
    assert kept.z.tolist() == [1.1, 0.9]


def test_observability(case6):
    net = case6.net
    full = observability_check(net, full_plan(net))
    assert full.observable and full.rank == 11
    one = observability_check(net, [MeasurementSpec(T.VMAG_SQ, 1)])
    assert not one.observable
    plan = full_plan(net, target=10)
    r1 = observability_check(net, plan).rank
    assert observability_check(net, plan + plan).rank == r1


def test_thinning_is_round_robin(case14):
    plan = full_plan(case14.net, target=14)
    kinds = [s.mtype for s in plan]
    assert len(plan) == 14
    assert all(kinds.count(t) == 2 for t in MeasurementType)


def test_default_sigmas():
    assert DEFAULT_SIGMA[T.VMAG_SQ] == 0.004
    assert DEFAULT_SIGMA[T.P_INJ] == 0.01


def test_plan_and_measurement_csv_round_trip(tmp_path, case6):
    plan = full_plan(case6.net, target=20)
    write_plan(plan, tmp_path / "plan.csv")
    assert read_plan(tmp_path / "plan.csv") == plan
    v = random_state(np.random.default_rng(0), 6)
    sets = [simulate_measurements(case6.net, v, plan, seed=t, t=t) for t in range(3)]
    write_measurement_sets(sets, tmp_path / "m.csv")
    back = read_measurement_sets(tmp_path / "m.csv")
    assert [m.t for m in back] == [0, 1, 2]
    for a, b in zip(sets, back):
        assert a.specs == b.specs and np.array_equal(a.z, b.z)
