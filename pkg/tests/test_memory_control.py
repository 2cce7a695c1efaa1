import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nodectl.dynamics import ControlSchedule, run_schedule
from nodectl.memory_control import (CoincidingTargetsError, MemoryControlProblem,
                                    SurrogateError, build_surrogate, memory_control_trace,
                                    memory_simultaneous_control, memory_spec,
                                    pairwise_simultaneous_control, plan_tracking,
                                    tracking_control, tracking_error, universal_tracking,
                                    universal_tracking_error)


def endpoint_error(schedule, problem, steps=2000):
    spec = memory_spec(problem.d, problem.d_p, schedule.t0, schedule.T)
    X, P = run_schedule(spec, schedule, problem.initial_x, problem.initial_p,
                        n_steps_per_unit_time=steps)
    return max(np.abs(X - problem.target_x).max(), np.abs(P - problem.target_p).max())


def random_problem(rng, N, d, d_p):
    return MemoryControlProblem(rng.uniform(-1, 1, (N, d)), rng.uniform(-1, 1, (N, d_p)),
                                rng.uniform(-1, 1, (N, d)), rng.uniform(-1, 1, (N, d_p)))


def test_problem_validation():
    with pytest.raises(ValueError):
        MemoryControlProblem([[0.0], [0.0]], [[1.0], [1.0]], [[0.0], [1.0]], [[0.0], [1.0]])
    with pytest.raises(CoincidingTargetsError):
        MemoryControlProblem([[0.0], [1.0]], [[0.0], [0.0]], [[2.0], [2.0]], [[1.0], [1.0]])
    prob = MemoryControlProblem.from_dict({"points": [[0.0, 1.0]], "targets": [[1.0, 1.0]],
                                           "target_memories": [[2.0]], "d_p": 1, "T": 2.0})
    assert (prob.N, prob.d, prob.d_p, prob.T) == (1, 2, 1, 2.0)
    assert MemoryControlProblem.from_dict(prob.to_dict()).to_dict() == prob.to_dict()


def test_pairwise_single_point():
    prob = MemoryControlProblem([[0.0]], [[0.0]], [[1.0]], [[1.0]])
    assert endpoint_error(pairwise_simultaneous_control(prob), prob, 100_000) <= 1e-6


def test_pairwise_identity_problem():
    X = np.array([[0.0], [0.5], [-0.3]])
    P = np.array([[1.0], [0.2], [0.0]])
    prob = MemoryControlProblem(X, P, X, P)
    assert endpoint_error(pairwise_simultaneous_control(prob), prob, 100_000) <= 1e-6


def test_pairwise_rejects_higher_dimensions():
    with pytest.raises(ValueError):
        pairwise_simultaneous_control(random_problem(np.random.default_rng(0), 2, 2, 1))


def test_shared_state_is_separated_first():
    prob = MemoryControlProblem([[0.2], [0.2], [0.7]], [[0.0], [1.0], [0.5]],
                                [[1.0], [0.0], [-1.0]], [[0.3], [0.6], [0.9]])
    trace = memory_control_trace(prob)
    first = trace.phases[0]
    assert first.name == "separate"
    cut = ControlSchedule(trace.schedule.architecture, 1, 1,
                          [s for s in trace.schedule.segments if s.t_end <= first.t_end + 1e-12])
    X, _ = run_schedule(memory_spec(1, 1, 0.0, cut.T), cut, prob.initial_x, prob.initial_p,
                        n_steps_per_unit_time=10_000)
    assert np.min(np.diff(np.sort(X[:, 0]))) > 1e-6


@pytest.mark.parametrize("N,d,d_p", [(2, 2, 2), (2, 1, 3), (1, 2, 1), (4, 3, 2), (5, 1, 1)])
def test_memory_control_cases(N, d, d_p):
    prob = random_problem(np.random.default_rng(N * 100 + d * 10 + d_p), N, d, d_p)
    assert endpoint_error(memory_simultaneous_control(prob), prob) <= 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10_000))
def test_closed_form_prediction_matches_integration(N, d, d_p, seed):
    prob = random_problem(np.random.default_rng(seed), N, d, d_p)
    trace = memory_control_trace(prob)
    np.testing.assert_allclose(trace.predicted_x, prob.target_x, atol=1e-8)
    assert endpoint_error(trace.schedule, prob) <= 1e-6


def test_surplus_memories_are_set_before_the_states():
    prob = random_problem(np.random.default_rng(5), 2, 1, 3)
    trace = memory_control_trace(prob)
    names = [ph.name for ph in trace.phases]
    assert "surplus" in names and "steer" in names
    assert names.index("surplus") < names.index("steer")


# -- surrogates ---------------------------------------------------------------------

def test_linear_curve_has_exact_surrogate():
    t = np.linspace(0, 1, 11)
    (tg,) = build_surrogate(t, [2 * t + 1], [0.0], n_intervals=1, tolerance=1e-12)
    assert tg.n_intervals == 1
    assert tg.slopes[0, 0] == pytest.approx(2.0)
    assert np.max(np.abs(tg.evaluate(t)[:, 0] - (2 * t + 1))) < 1e-12


def test_sine_surrogate_within_interpolation_bound():
    t = np.linspace(0, 2 * np.pi, 2001)
    (tg,) = build_surrogate(t, [np.sin(t)], [0.0], n_intervals=16, tolerance=1.0)
    bound = (2 * np.pi / 16) ** 2 / 8
    assert tg.n_intervals == 16
    assert np.max(np.abs(tg.evaluate(t)[:, 0] - np.sin(t))) <= bound


def test_equal_slopes_are_pulled_apart():
    t = np.linspace(0, 1, 101)
    targets = build_surrogate(t, [t, t + 1.0], [0.0, 1.0], n_intervals=2, tolerance=0.05)
    gap = 0.05 / (8 * 2 * 0.5)
    assert np.all(np.abs(targets[0].slopes[:, 0] - targets[1].slopes[:, 0]) >= gap * (1 - 1e-12))


def test_surrogate_refines_until_tolerance():
    t = np.linspace(0, 1, 401)
    (tg,) = build_surrogate(t, [np.sin(10 * t)], [0.0], n_intervals=2, tolerance=0.01)
    assert tg.n_intervals > 2 and tg.achieved <= 0.01
    with pytest.raises(SurrogateError):
        build_surrogate(t, [np.sin(10 * t)], [0.0], n_intervals=1, tolerance=1e-9,
                        max_doublings=2)


# -- tracking -----------------------------------------------------------------------

def test_constant_curve_is_held():
    t = np.linspace(0, 1, 51)
    targets = build_surrogate(t, [np.full_like(t, 0.7)], [0.2], n_intervals=2)
    sched = tracking_control(targets, 2)
    assert np.all(targets[0].slopes[:, 0] == 0)
    assert tracking_error(sched, targets, 2000)[0] <= 1e-3


def test_identity_curve_is_tracked():
    t = np.linspace(0, 1, 51)
    targets = build_surrogate(t, [t], [0.5], n_intervals=2)
    sched = tracking_control(targets, 2)
    assert sched.t0 == -1.0 and sched.T == pytest.approx(1.0)
    assert tracking_error(sched, targets, 2000)[0] <= 1e-3


def test_three_sines_within_tolerance():
    t = np.linspace(0, 1, 401)
    curves = [np.sin(c * t) for c in (1.0, 2.5, 4.0)]
    targets = build_surrogate(t, curves, [0.1, 0.4, 0.8], n_intervals=4, tolerance=0.025)
    err = tracking_error(tracking_control(targets, 2), targets, 400)
    assert np.all(err < 0.05)


def test_tracking_needs_twice_the_state_dimension():
    t = np.linspace(0, 1, 11)
    targets = build_surrogate(t, [t], [0.0], n_intervals=1)
    with pytest.raises(ValueError):
        tracking_control(targets, 1)


@pytest.fixture(scope="module")
def sine_trace():
    t = np.linspace(0, 1, 401)
    curves = [0.5 + np.sin(c * t + ph) for c, ph in ((1.0, 0.0), (3.0, 1.0), (5.0, 2.0))]
    targets = build_surrogate(t, curves, [0.1, 0.4, 0.8], n_intervals=4, tolerance=0.025)
    trace = plan_tracking(targets, 2)
    spec = memory_spec(1, 2, trace.schedule.t0, trace.schedule.T)
    X0 = np.array([[0.1], [0.4], [0.8]])
    tt, X, P = run_schedule(spec, trace.schedule, X0, record=True, n_steps_per_unit_time=2000)
    return targets, trace, tt, X, P


def _window(tt, lo, hi):
    return (tt >= lo - 1e-12) & (tt <= hi + 1e-12)


def test_reconfiguration_touches_only_the_idle_block(sine_trace):
    _, trace, tt, _, P = sine_trace
    recs = [ph for ph in trace.phases if ph.name == "reconfigure"]
    assert recs
    for ph in recs:
        m = _window(tt, ph.t_start, ph.t_end)
        active = [c for c in range(2) if c not in ph.coords]
        assert np.max(np.ptp(P[m][:, :, active], axis=0)) <= 1e-12


def test_states_move_linearly_on_each_interval(sine_trace):
    targets, _, tt, X, _ = sine_trace
    breaks = targets[0].breaks
    for k in range(len(breaks) - 1):
        m = _window(tt, breaks[k], breaks[k + 1])
        slope = np.diff(X[m][:, :, 0], axis=0) / np.diff(tt[m])[:, None]
        want = np.array([tg.slopes[k, 0] for tg in targets])
        assert np.max(np.abs(slope - want)) <= 1e-6


def test_finished_points_stay_put_during_later_reconfigurations(sine_trace):
    _, trace, tt, _, P = sine_trace
    recs = [ph for ph in trace.phases if ph.name == "reconfigure"]
    checked = 0
    for w0, w1 in trace.windows:
        if np.isnan(w0):
            continue
        inside = [ph for ph in recs if w0 - 1e-12 <= ph.t_start < w1]
        for ph in inside[:-1]:
            m = _window(tt, ph.t_end, inside[-1].t_end)
            assert np.max(np.ptp(P[m][:, ph.point, list(ph.coords)], axis=0)) <= 1e-9
            checked += 1
    assert checked > 0


# -- universal tracking ----------------------------------------------------------------

def test_single_cell_constant_map():
    t = np.linspace(0, 1, 101)
    res = universal_tracking([[0.0]], [[1.0]], t, [np.sin(2 * t)[:, None]])
    xs = np.linspace(0.05, 0.95, 10)[:, None]
    err = universal_tracking_error(res, xs, np.tile(np.sin(2 * t)[None, :, None], (10, 1, 1)))
    assert err <= 0.05


def _linear_map_error(cells):
    times = np.linspace(0, 1, 101)
    e = np.linspace(0, 1, cells + 1)
    c = 0.5 * (e[:-1] + e[1:])
    res = universal_tracking(e[:-1, None], e[1:, None], times, (c[:, None] * times)[..., None])
    xs = (np.arange(50) + 0.5) / 50
    return universal_tracking_error(res, xs[:, None], (xs[:, None] * times)[..., None])


def test_linear_map_error_and_refinement():
    e4 = _linear_map_error(4)
    e8 = _linear_map_error(8)
    assert e4 < 0.15
    assert e8 < e4
