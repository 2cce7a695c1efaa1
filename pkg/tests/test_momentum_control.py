import itertools
import math

import numpy as np
import pytest

from nodectl.dynamics import (Architecture, ControlSchedule, ModelSpec, PerceptronControl,
                              propagate_damped,
                              propagate_forced, reference_endpoints, run_schedule)
from nodectl.momentum_control import (ControlProblem, HorizonTooShort, approximate_function,
                                      approximation_error, compression_factor,
                                      compressive_schedule, grid_cells, prepare_dataset,
                                      q_for_target, synthesize)


def endpoints(schedule, X0, steps=20_000):
    spec = ModelSpec.momentum(schedule.d, t0=schedule.t0, T=schedule.T)
    return reference_endpoints(spec, schedule, X0, None, n_steps_per_unit_time=steps)


def random_problem(rng, N, d, T=10.0, duplicate=False):
    X = rng.uniform(-1, 1, (N, d))
    Y = rng.uniform(-1, 1, (N, d))
    if duplicate and N > 1:
        Y[1] = Y[0]
    return ControlProblem(X, Y, T)


def test_problem_rejects_coinciding_points():
    with pytest.raises(ValueError):
        ControlProblem([[0.0, 1.0], [0.0, 1.0]], [[1.0, 1.0], [2.0, 2.0]])
    with pytest.raises(ValueError):
        ControlProblem([[0.0], [1.0]], [[1.0], [2.0]])


def test_q_reaches_target_through_closed_forms():
    L, R = 5.0, 5.0
    q = q_for_target(1.0, 0.0, 0.0, L, R)
    x, p = propagate_forced(1.0, 0.0, q, L)
    x, p = propagate_damped(x, p, R)
    assert abs(x) <= 1e-6


def test_q_vanishes_at_free_endpoint():
    x0, p0, L, R = 0.3, -0.4, 2.0, 3.0
    free, _ = propagate_damped(*propagate_damped(x0, p0, L), R)
    assert abs(q_for_target(x0, p0, free, L, R)) < 1e-12


def test_preparation_separates_shared_first_components():
    problem = ControlProblem([[0.5, 0.1], [0.5, -0.3]], [[0.0, 0.0], [1.0, 1.0]])
    flow, t_end = prepare_dataset(problem, 1.0)
    sched = flow.builder.build()
    X, P = endpoints(sched, problem.points)
    assert abs(X[0, 0] - X[1, 0]) > 0 or abs(X[0, 1] - X[1, 1]) > 1e-6
    assert np.all(X[:, 0] > np.max(problem.targets[:, 0]) + 1.0 + np.max(np.abs(problem.targets)) - 1e-6)
    np.testing.assert_allclose(X, flow.X, atol=1e-8)


def test_fixed_point_problem():
    problem = ControlProblem([[0.3, -0.2]], [[0.3, -0.2]])
    trace = synthesize(problem)
    X, _ = endpoints(trace.schedule, problem.points)
    assert np.max(np.abs(X - problem.targets)) <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_random_problems_reach_targets(seed):
    rng = np.random.default_rng(seed)
    problem = random_problem(rng, 5, 2, duplicate=seed % 2 == 0)
    trace = synthesize(problem, seed=seed)
    X, _ = endpoints(trace.schedule, problem.points)
    assert np.max(np.abs(X - problem.targets)) <= 1e-3


def test_coinciding_targets_and_three_dimensions():
    rng = np.random.default_rng(11)
    problem = ControlProblem(rng.uniform(-1, 1, (2, 2)), [[0.4, 0.4], [0.4, 0.4]])
    X, _ = endpoints(synthesize(problem).schedule, problem.points)
    assert np.max(np.abs(X - 0.4)) <= 1e-3
    problem = random_problem(rng, 4, 3)
    X, _ = endpoints(synthesize(problem).schedule, problem.points)
    assert np.max(np.abs(X - problem.targets)) <= 1e-3


def test_switch_count_linear_in_points():
    counts = []
    sizes = [2, 4, 8, 16]
    for n in sizes:
        trace = synthesize(random_problem(np.random.default_rng(n), n, 2))
        assert trace.switch_count <= 8 * n
        counts.append(trace.switch_count)
    slope, intercept = np.polyfit(sizes, counts, 1)
    assert 0 < slope <= 8 and abs(intercept) <= 20


def test_first_component_sums_distinct():
    problem = random_problem(np.random.default_rng(3), 6, 2)
    trace = synthesize(problem)
    last = max(r.t_end for r in trace.phase_log if r.name == "FirstComponent")
    cut = ControlSchedule(Architecture.MOMENTUM, 2, 2,
                          [s for s in trace.schedule.segments if s.t_end <= last + 1e-12])
    X, P = endpoints(cut, problem.points)
    S = np.sort(X[:, 0] + P[:, 0])
    assert np.min(np.diff(S)) >= 1e-3 * (1 - 1e-6)


def _zeroed(schedule, lo, hi):
    segs = []
    for s in schedule.segments:
        if lo - 1e-12 <= s.t_start and s.t_end <= hi + 1e-12:
            s = type(s)(s.t_start, s.duration, PerceptronControl.zeros(schedule.d))
        segs.append(s)
    return ControlSchedule(schedule.architecture, schedule.d, schedule.d_p, segs)


def test_isolating_push_leaves_other_points_alone():
    problem = random_problem(np.random.default_rng(7), 4, 3)
    trace = synthesize(problem)
    recs = [r for r in trace.phase_log if r.name == "RemainingComponents"]
    X, _ = endpoints(trace.schedule, problem.points)
    for point, group in itertools.groupby(recs, key=lambda r: r.point):
        group = list(group)
        axis = int(np.flatnonzero(group[0].w)[0])
        Xz, _ = endpoints(_zeroed(trace.schedule, group[0].t_start, group[-1].t_end),
                          problem.points)
        others = [j for j in range(problem.N) if j != point]
        assert np.max(np.abs(Xz[others, axis] - X[others, axis])) <= 1e-9
        assert np.max(np.abs(Xz[others][:, 1:] - X[others][:, 1:])) <= 1e-9


def test_compressive_duration_and_rate():
    sched = compressive_schedule(0, [1.0], [2.0], 0.5, stiffness=0.2)
    corners = np.array([[1.0], [2.0]])
    X, _ = endpoints(sched, corners, 100_000)
    np.testing.assert_allclose(X[:, 0] / corners[:, 0], 0.5, atol=1e-8)
    lam = -0.5 + math.sqrt(0.05)
    # asymptotic rate: late-time ratio per unit time approaches exp(lam)
    assert compression_factor(0.2, 41.0) / compression_factor(0.2, 40.0) == pytest.approx(math.exp(lam), rel=1e-6)


def test_compressive_box_stays_positive_and_shrinks():
    sched = compressive_schedule(1, [-1.0, 0.5], [1.0, 1.5], 0.3, stiffness=0.2)
    spec = ModelSpec.momentum(2, T=sched.T)
    corners = np.array([[x, y] for x in (-1.0, 1.0) for y in (0.5, 1.5)])
    _, X, _ = run_schedule(spec, sched, corners, record=True, n_steps_per_unit_time=2000)
    assert np.all(X[:, :, 1] > 0)
    ext0 = np.ptp(corners[:, 1])
    assert np.ptp(X[-1, :, 1]) <= 0.3 * ext0 + 1e-9
    np.testing.assert_allclose(X[-1, :, 0], corners[:, 0])


def test_compressive_degenerate_box():
    sched = compressive_schedule(0, [1.0], [1.0], 0.5)
    X, _ = endpoints(sched, np.array([[1.0], [1.0]]))
    assert np.ptp(X[:, 0]) == 0.0


def test_compressive_rejects_bad_arguments():
    with pytest.raises(ValueError):
        compressive_schedule(0, [1.0], [2.0], 1.5)
    with pytest.raises(ValueError):
        compressive_schedule(0, [1.0], [2.0], 0.5, stiffness=0.3)
    with pytest.raises(ValueError):
        compressive_schedule(0, [-1.0], [2.0], 0.5)


def _two_rectangles(shape):
    lows, highs = grid_cells([0, 0], [1, 1], shape)
    centres = (lows + highs) / 2
    values = np.where(centres[:, :1] < 0.5, [[1.0, 0.5]], [[-0.5, 1.0]])
    return lows, highs, values


def _f(points):
    return np.where(points[:, :1] < 0.5, [[1.0, 0.5]], [[-0.5, 1.0]])


def test_constant_function_single_cell():
    res = approximate_function([[0.0, 0.0]], [[1.0, 1.0]], [[0.5, -0.5]])
    rng = np.random.default_rng(0)
    pts = rng.uniform(0.05, 0.95, (10, 2))
    X, _ = endpoints(res.schedule, pts, 2000)
    assert np.max(np.abs(X - [0.5, -0.5])) <= 0.05


def test_two_rectangle_error_and_refinement():
    g = (np.arange(20) + 0.5) / 20
    samples = np.array([[x, y] for x in g for y in g])
    errs = []
    for shape in [(2, 1), (4, 2)]:
        res = approximate_function(*_two_rectangles(shape))
        dev, norm = approximation_error(res, samples, _f(samples), n_steps_per_unit_time=200)
        errs.append(dev / norm)
    assert errs[0] <= 0.1
    assert errs[1] < errs[0]


def test_horizon_below_minimum_is_refused():
    lows, highs, values = _two_rectangles((2, 1))
    res = approximate_function(lows, highs, values)
    with pytest.raises(HorizonTooShort):
        approximate_function(lows, highs, values, T_total=0.5 * res.T_min)
    longer = approximate_function(lows, highs, values, T_total=res.T_min + 5.0)
    assert longer.schedule.T == pytest.approx(res.T_min + 5.0)
