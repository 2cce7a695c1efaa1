import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from nodectl.dynamics import (Activation, Architecture, ControlSchedule, MemoryControl,
                              ModelSpec, PerceptronControl, PhasePoint, Regime,
                              ScheduleBuilder, ScheduleError, ShapeError, activation,
                              eigen_regime, flow_endpoint, integrate_euler,
                              integrate_reference, project_state, propagate_damped,
                              propagate_forced, run_schedule, vector_field)


def _wait(arch, d, d_p, T):
    b = ScheduleBuilder(arch, d, d_p)
    b.wait(T)
    return b.build()


def test_activation_values():
    assert activation("relu", -3.0) == 0.0
    assert activation("relu", 0.0) == 0.0
    assert activation("sigmoid", 0.0) == 0.5
    assert activation("sigmoid", 40.0) == pytest.approx(1.0)


def test_vector_field_examples():
    spec = ModelSpec.momentum(1)
    dz = vector_field(spec, PerceptronControl([0.0], [0.0]), PhasePoint([1.0], [1.0]))
    assert dz.x[0] == 1.0 and dz.p[0] == -1.0

    mem = ModelSpec.memory(2, 3)
    dz = vector_field(mem, MemoryControl.zeros(2, 3), PhasePoint([1.0, -2.0], [0.5, 1, 2]))
    assert not dz.x.any() and not dz.p.any()

    fo = ModelSpec.first_order(2)
    dz = vector_field(fo, PerceptronControl([1.0, 0.0], [0.0, 1.0], 0.0), PhasePoint([0.0, 2.0]))
    np.testing.assert_array_equal(dz.x, [2.0, 0.0])


def test_vector_field_rejects_wrong_controls():
    with pytest.raises(ShapeError):
        vector_field(ModelSpec.memory(1, 1), PerceptronControl([1.0], [1.0]), PhasePoint([0.0], [0.0]))
    with pytest.raises(ShapeError):
        ModelSpec(Architecture.MOMENTUM, 2, 1)


def test_zero_controls_keep_first_order_state():
    spec = ModelSpec.first_order(2, T=3.0)
    traj = integrate_euler(spec, _wait("first_order", 2, 0, 3.0), [0.3, -1.2], 100)
    np.testing.assert_array_equal(traj.x, np.tile([0.3, -1.2], (len(traj.times), 1)))
    end = flow_endpoint(spec, _wait("first_order", 2, 0, 3.0), [0.3, -1.2])
    np.testing.assert_array_equal(end.x, [0.3, -1.2])


def test_euler_free_momentum_halves_velocity():
    T = math.log(2)
    spec = ModelSpec.momentum(1, T=T)
    sched = _wait("momentum", 1, 1, T)
    end = integrate_euler(spec, sched, PhasePoint([0.0], [1.0]), 1000).endpoint
    assert end.x[0] == pytest.approx(0.5, abs=1e-3)
    assert end.p[0] == pytest.approx(0.5, abs=1e-3)


def test_euler_converges_to_reference_at_first_order():
    rng = np.random.default_rng(4)
    b = ScheduleBuilder("momentum", 2, 2)
    for _ in range(4):
        b.add(rng.uniform(0.2, 0.6), PerceptronControl(rng.normal(size=2), rng.normal(size=2),
                                                      rng.normal()))
    sched = b.build()
    spec = ModelSpec.momentum(2, activation="sigmoid", T=sched.T)
    x0 = PhasePoint([0.4, -0.2], [0.1, 0.0])
    ref = integrate_reference(spec, sched, x0, 20_000).endpoint
    e1 = np.abs(integrate_euler(spec, sched, x0, 200).endpoint.as_vector() - ref.as_vector()).max()
    e2 = np.abs(integrate_euler(spec, sched, x0, 400).endpoint.as_vector() - ref.as_vector()).max()
    assert math.log2(e1 / e2) >= 0.9


def test_reference_matches_damped_closed_form():
    spec = ModelSpec.momentum(1, T=10.0)
    traj = integrate_reference(spec, _wait("momentum", 1, 1, 10.0), PhasePoint([0.7], [-1.3]), 2000)
    x, p = propagate_damped(0.7, -1.3, traj.times)
    assert np.max(np.abs(traj.x[:, 0] - x)) <= 1e-8
    assert np.max(np.abs(traj.p[:, 0] - p)) <= 1e-8


def test_memory_inactive_hyperplane_freezes_memory():
    spec = ModelSpec.memory(2, 2, T=2.0)
    cv = MemoryControl(np.eye(2), np.eye(2), np.zeros((2, 2)), [0.0, 0.0], [0.3, -0.1],
                       [5.0, -2.0], [1.0, 0.0], -10.0)
    b = ScheduleBuilder("memory", 2, 2)
    b.add(2.0, cv)
    traj = integrate_reference(spec, b.build(), PhasePoint([0.5, 1.0], [0.2, -0.7]), 2000)
    assert np.max(np.abs(traj.p - [0.2, -0.7])) == 0.0


def test_propagate_examples():
    x, p = propagate_damped(1.0, 1.0, 50.0)
    assert x == pytest.approx(2.0) and p == pytest.approx(0.0, abs=1e-15)
    assert propagate_damped(0.3, -0.2, 0.0) == (0.3, -0.2)
    x, p = propagate_damped(0.0, 2.0, math.log(2))
    assert (x, p) == (pytest.approx(1.0), pytest.approx(1.0))
    assert propagate_forced(0.3, 0.4, 0.0, 1.7) == pytest.approx(propagate_damped(0.3, 0.4, 1.7))
    assert propagate_forced(0.0, 0.0, 1.0, 50.0)[1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        propagate_damped(0.0, 1.0, -1.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3), st.floats(0, 10))
def test_propagate_forced_matches_scipy(x0, p0, q, t):
    sol = solve_ivp(lambda s, z: [z[1], q - z[1]], (0, t), [x0, p0], rtol=1e-12, atol=1e-13)
    x, p = propagate_forced(x0, p0, q, t)
    assert abs(x - sol.y[0, -1]) <= 1e-8
    assert abs(p - sol.y[1, -1]) <= 1e-8


def test_eigen_regime():
    rep = eigen_regime(0.0)
    assert sorted(z.real for z in rep.eigenvalues) == [-1.0, 0.0]
    assert rep.classification is Regime.DEGENERATE
    assert eigen_regime(0.2).classification is Regime.ATTRACTOR
    osc = eigen_regime(5.0)
    assert osc.classification is Regime.DAMPED_OSCILLATOR
    assert all(abs(z.imag) > 0 for z in osc.eigenvalues)
    assert eigen_regime(-1.0).classification is Regime.SADDLE
    for w in (-2.0, 0.1, 0.2, 3.0):
        for lam in eigen_regime(w).eigenvalues:
            assert abs(lam * lam + lam + w) < 1e-12


def test_project_state():
    np.testing.assert_array_equal(project_state(PhasePoint([1.0, 2.0], [9.0, 9.0])), [1.0, 2.0])


def test_schedule_json_round_trip():
    rng = np.random.default_rng(0)
    b = ScheduleBuilder("memory", 2, 3, t0=-1.0)
    for _ in range(3):
        b.add(rng.uniform(0.1, 1), MemoryControl(rng.normal(size=(2, 2)), rng.normal(size=(2, 2)),
                                                 rng.normal(size=(2, 3)), rng.normal(size=2),
                                                 rng.normal(size=2), rng.normal(size=3),
                                                 rng.normal(size=2), 0.3, 0.1, -0.2))
    s = b.build()
    again = ControlSchedule.from_json(s.to_json())
    assert again.to_json() == s.to_json()


def test_schedule_must_cover_horizon():
    spec = ModelSpec.first_order(1, T=2.0)
    with pytest.raises(ScheduleError):
        integrate_euler(spec, _wait("first_order", 1, 0, 1.0), [0.0])


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2), st.floats(-2, 2))
def test_free_momentum_conserves_position_plus_velocity(x1, x2, p1, p2):
    spec = ModelSpec.momentum(2, T=10.0)
    traj = integrate_euler(spec, _wait("momentum", 2, 2, 10.0), PhasePoint([x1, x2], [p1, p2]), 1000)
    drift = np.abs(traj.x + traj.p - np.array([x1 + p1, x2 + p2])).max()
    assert drift <= 1e-6


def test_sigmoid_first_order_keeps_points_apart():
    rng = np.random.default_rng(2)
    b = ScheduleBuilder("first_order", 2, 0)
    lip = 0.0
    for _ in range(5):
        w, a = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        b.add(0.4, PerceptronControl(w, a, rng.uniform(-1, 1)))
        lip = max(lip, 0.25 * np.linalg.norm(w) * np.linalg.norm(a))
    sched = b.build()
    spec = ModelSpec.first_order(2, activation="sigmoid", T=sched.T)
    X0 = rng.uniform(-1, 1, (30, 2))
    X, _ = run_schedule(spec, sched, X0, n_steps_per_unit_time=2000)
    bound = math.exp(-lip * sched.T) / 2
    for i in range(30):
        for j in range(i):
            assert np.linalg.norm(X[i] - X[j]) >= bound * np.linalg.norm(X0[i] - X0[j])
