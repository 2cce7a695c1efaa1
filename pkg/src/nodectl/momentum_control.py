"""Simultaneous exact control of the momentum ResNet (eps = 1) by construction.

Every synthesized segment keeps each point strictly on one side of its
hyperplane, so inside a segment the dynamics are linear, forced by a term of
the form ``alpha + rate*s + beta*exp(-s)``.  The synthesis tracks all points
with closed forms; integrating the resulting schedule only adds integration
error.

Pipeline for ``N`` points on ``[0, T]``:

1. preparation: push the first component above every target, then spread
   the second components so they are pairwise distinct;
2. first component, up to ``T/2``: one isolating push per point on ``x1``,
   with hyperplanes on the free ``x2`` that follow the point;
3. remaining components, up to ``0.9 T``: the same with roles swapped, pushes
   on ``x2..xd`` and hyperplanes on the now free ``x1``.

An isolating push moves the free endpoint ``x + (1 - exp(-(T-t))) p`` of one
point only.  Points below the hyperplanes never activate; points above see
three segments whose effects on their free endpoints cancel exactly, for any
position and velocity.  Free coordinates cross at most once per pair, so the
visiting order is planned in advance to avoid crossings inside a slot.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import brentq
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .dynamics import (Architecture, ControlSchedule, ModelSpec, PerceptronControl,
                       Regime, ScheduleBuilder, eigen_regime, reference_endpoints)


class SynthesisError(RuntimeError):
    """The construction could not meet one of its own safety margins."""


MAGNITUDE_CAP = 1e6
MARGIN_FLOOR = 1e-6
MARGIN_FRACTION = 0.5


@dataclass(frozen=True, eq=False)
class ControlProblem:
    points: np.ndarray
    targets: np.ndarray
    T: float = 10.0

    def __post_init__(self):
        X = np.atleast_2d(np.array(self.points, dtype=float))
        Y = np.atleast_2d(np.array(self.targets, dtype=float))
        if X.shape != Y.shape:
            raise ValueError("points and targets must have the same shape")
        if X.shape[1] < 2:
            raise ValueError("simultaneous control of the momentum model needs d >= 2")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValueError("points and targets must be finite")
        if not self.T > 0:
            raise ValueError("horizon must be positive")
        n = X.shape[0]
        for i in range(n):
            for j in range(i + 1, n):
                if np.array_equal(X[i], X[j]):
                    raise ValueError(f"initial points {i} and {j} coincide")
        object.__setattr__(self, "points", X)
        object.__setattr__(self, "targets", Y)

    @property
    def N(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]


@dataclass
class PhaseRecord:
    name: str
    point: int | None
    t_start: float
    t_end: float
    a: list
    offset: list
    w: list
    q: list | None = None

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class SynthesisTrace:
    schedule: ControlSchedule
    phase_log: list = field(default_factory=list)
    predicted_x: np.ndarray | None = None
    predicted_p: np.ndarray | None = None

    @property
    def switch_count(self):
        return len(self.schedule.segments)

    def to_dict(self):
        return {"switch_count": self.switch_count,
                "phases": [r.to_dict() for r in self.phase_log]}


# -- closed forms under forcing alpha + rate*s + beta*exp(-s) -----------------

def forced_response(x0, p0, alpha, rate, beta, s):
    """State after time ``s`` of ``x'' + x' = alpha + rate*s + beta*exp(-s)``."""
    em = np.expm1(-s)            # e^{-s} - 1
    e = em + 1.0
    x = (x0 - p0 * em + alpha * (s + em) + rate * (0.5 * s * s - s - em)
         + beta * (-em - s * e))
    p = p0 * e - alpha * em + rate * (s + em) + beta * s * e
    return x, p


def _range_on(alpha, rate, beta, dur):
    """Min and max of ``alpha + rate*s + beta*exp(-s)`` over ``s`` in ``[0, dur]``."""
    alpha, beta = np.broadcast_arrays(np.asarray(alpha, float), np.asarray(beta, float))
    cand = [alpha + beta, alpha + rate * dur + beta * math.exp(-dur)]
    if rate != 0.0:
        ratio = np.where(beta / rate > 0, beta / rate, 1.0)
        s_star = np.clip(np.log(ratio), 0.0, dur)
        cand.append(alpha + rate * s_star + beta * np.exp(-s_star))
    stack = np.stack(cand)
    return stack.min(axis=0), stack.max(axis=0)


def advance(X, P, dur, w, a, offset, kink_tol=1e-7):
    """Propagate all points through one segment in closed form.

    ``offset`` is ``(base, rate, decay)``.  The components in the support of
    ``a`` must be unforced (``w`` zero there) so every hyperplane argument has
    the closed form ``alpha + rate*s + beta*exp(-s)``.  Returns the new state
    and a boolean mask of active points.
    """
    w = np.asarray(w, dtype=float)
    a = np.asarray(a, dtype=float)
    if np.any((w != 0) & (a != 0)):
        raise ValueError("hyperplane normal and forcing direction must have disjoint supports")
    b0, brate, bdecay = offset
    alpha = (X + P) @ a + b0
    beta = bdecay - P @ a
    lo, hi = _range_on(alpha, brate, beta, dur)
    active = lo > 0
    if not np.all(active | (hi < 0)):
        bad = np.flatnonzero(~(active | (hi < 0)))
        raise SynthesisError(f"points {bad.tolist()} cross the hyperplane inside a segment")
    if np.any(active & (lo < kink_tol)) or np.any(~active & (hi > -kink_tol)):
        raise SynthesisError("hyperplane passes too close to a point")
    act = active.astype(float)
    Xn, Pn = forced_response(X, P, (act * alpha)[:, None] * w, brate * act[:, None] * w,
                             (act * beta)[:, None] * w, dur)
    return Xn, Pn, active


def q_for_target(x0, p0, target, force_time, coast_time):
    """Constant force that, applied for ``force_time`` and followed by free motion
    for ``coast_time``, takes ``(x0, p0)`` to position ``target``.

    Composes the forced and damped closed forms and solves the affine equation.
    """
    L, R = force_time, coast_time
    eL, eR = math.exp(-L), -math.expm1(-R)
    free_end = x0 + (1 - eL) * p0 + eR * eL * p0
    gain = (L + math.expm1(-L)) + eR * (1 - eL)
    return (target - free_end) / gain


class _Flow:
    """Closed-form state of all points plus the schedule under construction."""

    def __init__(self, X, t0, P=None):
        self.X = np.array(X, dtype=float)
        self.P = np.zeros_like(self.X) if P is None else np.array(P, dtype=float)
        self.d = self.X.shape[1]
        self.builder = ScheduleBuilder(Architecture.MOMENTUM, self.d, self.d, t0)
        self.log = []

    @property
    def t(self):
        return self.builder.t

    def wait(self, dur):
        if dur <= 1e-9:
            return
        e = math.exp(-dur)
        self.X = self.X - np.expm1(-dur) * self.P
        self.P = self.P * e
        if self.builder.segments and _is_zero(self.builder.segments[-1].params):
            last = self.builder.segments.pop()
            self.builder.t = last.t_start
            dur = last.duration + dur
        self.builder.wait(dur)

    def copy(self):
        new = _Flow.__new__(_Flow)
        new.X, new.P, new.d = self.X.copy(), self.P.copy(), self.d
        new.builder = copy.copy(self.builder)
        new.builder.segments = list(self.builder.segments)
        new.log = list(self.log)
        return new

    def adopt(self, other):
        self.X, self.P, self.builder, self.log = other.X, other.P, other.builder, other.log

    def apply(self, name, point, dur, w, a, offset, q=None):
        t0 = self.t
        self.X, self.P, active = advance(self.X, self.P, dur, w, a, offset)
        self.builder.add(dur, PerceptronControl(w, a, *offset))
        self.log.append(PhaseRecord(name, point, t0, self.t, list(map(float, a)),
                                    list(map(float, offset)), list(map(float, w)), q))
        return active


def _is_zero(params):
    return not np.any(params.w)


def _unit(d, k, scale=1.0):
    v = np.zeros(d)
    v[k] = scale
    return v


def _free_gap_min(dS, dP, t_lo, t_hi):
    """Min of ``|dS - dP*exp(-t)|`` on ``[t_lo, t_hi]`` (the gap is monotone in t)."""
    g0 = dS - dP * np.exp(-t_lo)
    g1 = dS - dP * np.exp(-t_hi)
    out = np.minimum(np.abs(g0), np.abs(g1))
    return np.where(np.sign(g0) != np.sign(g1), 0.0, out)


# -- phase 1 -------------------------------------------------------------------

def prepare_dataset(problem: ControlProblem, time_budget: float, flow=None, seed=0):
    """Push component 1 above all targets, then separate second components.

    Returns ``(flow, t_end)``; ``flow.X, flow.P`` are the prepared phase points.
    """
    flow = flow or _Flow(problem.points, 0.0)
    X, Y, d = flow.X, problem.targets, problem.d
    C = 1.0 + np.max(np.abs(Y))
    half = time_budget / 2
    kernel = half + math.expm1(-half)           # displacement per unit constant force
    need = np.max(Y[:, 0]) + C
    coast = X[:, 0] - np.expm1(-half) * flow.P[:, 0]
    if np.min(coast) <= need:
        b = 2.0 * (np.max(np.abs(X)) + np.max(np.abs(flow.P)) + 1.0)
        lift = X[:, 1] + b
        w1 = 2.0 * np.max((need - coast) / (lift * kernel))
        while True:
            trial = flow.copy()
            trial.apply("Preparation", None, half, _unit(d, 0, w1), _unit(d, 1), (b, 0.0, 0.0))
            if np.min(trial.X[:, 0]) > need:
                break
            w1 *= 2.0
        flow.adopt(trial)
    else:
        flow.wait(half)

    # distinct second components (the isolation coordinate of the next phase):
    # push x2 through an all-active hyperplane on the other coordinates
    if problem.N > 1:
        rng = np.random.default_rng(seed)
        c = rng.uniform(1.0, 2.0, d)
        c[1] = 0.0
        b = 1.0 - np.min(flow.X @ c) + np.sum(c * np.abs(flow.P))
        e2 = _unit(d, 1)
        X0, P0, _ = advance(flow.X, flow.P, half / 2, 0 * e2, c, (b, 0.0, 0.0))
        X1, P1, _ = advance(flow.X, flow.P, half / 2, e2, c, (b, 0.0, 0.0))
        U, V = X1[:, 1] - X0[:, 1], P1[:, 1] - P0[:, 1]
        scale = max(np.ptp(X0[:, 1]), 1.0) / max(np.ptp(U), 1e-300)
        grid = np.concatenate([[0.0], scale * np.geomspace(0.01, 10.0, 31)])
        seps = np.array([_spread_gap(X0[:, 1] + w2 * U, P0[:, 1] + w2 * V) for w2 in grid])
        best = seps.max()
        # the weakest push giving a usable spread; larger ones only cost magnitude
        enough = min(0.5 * best, 0.05 * max(np.ptp(X0[:, 1]), 1.0) / problem.N)
        best_w = grid[np.argmax(seps >= enough)]
        if best <= 0:
            raise SynthesisError("could not separate second components")
        if best_w > 0:
            # push, then a uniform force that puts the mean of x2 + p2 back
            F0 = np.mean(flow.X[:, 1] + flow.P[:, 1])
            flow.apply("Preparation", None, half / 2, e2 * best_w, c, (b, 0.0, 0.0))
            drift = np.mean(flow.X[:, 1] + flow.P[:, 1]) - F0
            flow.apply("Preparation", None, half / 2, e2 * (-drift / (half / 2)),
                       np.zeros(d), (1.0, 0.0, 0.0))
        else:
            flow.wait(half)
    else:
        flow.wait(half)
    return flow, flow.t


def _spread_gap(X, P):
    """Smallest pairwise gap of both the positions and their free limits ``X + P``."""
    return min(_min_pair_gap(X), _min_pair_gap(X + P))


def _min_pair_gap(v):
    s = np.sort(v)
    return np.min(np.diff(s)) if len(s) > 1 else np.inf


# -- isolating pushes ------------------------------------------------------------

def free_endpoint(X, P, t, T):
    """Position reached at ``T`` by free motion from ``(X, P)`` at time ``t``."""
    return X - np.expm1(-(T - t)) * P


def _kernel_moments(a, b, t0, T):
    """``int K`` and ``int K exp(-(t - t0))`` over ``[a, b]`` with
    ``K(t) = 1 - exp(-(T - t))``, the free-endpoint response to a unit force."""
    I = (b - a) - (math.exp(b - T) - math.exp(a - T))
    J = (math.exp(-(a - t0)) - math.exp(-(b - t0))) - math.exp(-(T - t0)) * (b - a)
    return I, J


def _side_gaps(flow, i, others, axis, L):
    """Signed smallest free gaps between point ``i`` and ``others`` on the
    isolation axis over the next ``L``: positive means ``other`` stays above."""
    X, P = flow.X[:, axis], flow.P[:, axis]
    dS = X[others] + P[others] - X[i] - P[i]
    dP = P[others] - P[i]
    g = _free_gap_min(dS, dP, 0.0, L)
    return np.where(X[others] > X[i], g, -g)


def isolate(flow, i, below, above, axis, forced, shift, L, T, name):
    """Shift the free endpoint of point ``i`` by ``shift`` on the ``forced``
    components, leaving every other point's free endpoint unchanged.

    Hyperplanes on the ``axis`` coordinate follow point ``i``.  Points in
    ``below`` never activate.  With nothing above, one segment suffices;
    otherwise three segments with weights ``(c1, c2, 1)`` and margins chosen
    so that the response of every point above cancels for any position and
    velocity, while point ``i`` is active only in the first two.
    """
    d = flow.d
    g_down = -float(np.max(_side_gaps(flow, i, below, axis, L))) if len(below) else np.inf
    g_up = float(np.min(_side_gaps(flow, i, above, axis, L))) if len(above) else np.inf
    if g_down < MARGIN_FLOOR or g_up < MARGIN_FLOOR:
        raise SynthesisError(f"point {i}: ordering margin collapsed")
    shift = np.asarray(shift, dtype=float)
    t0 = flow.t
    if not len(above):
        r = MARGIN_FRACTION * g_down if np.isfinite(g_down) else 1.0
        I, _ = _kernel_moments(t0, t0 + L, t0, T)
        plan = [(L, r, shift / (r * I))]
    else:
        h = L / 3
        (I1, J1), (I2, J2), (I3, J3) = (_kernel_moments(t0 + k * h, t0 + (k + 1) * h, t0, T)
                                        for k in range(3))
        c1, c2 = np.linalg.solve([[I1, I2], [J1, J2]], [-I3, -J3])
        # margins: r3 above the point, r2 and r1 below; r1 is fixed by the
        # cancellation, so r3 is as large as both sides allow
        r2 = 0.1 * min(g_down, g_up)
        r3 = 0.6 * g_up
        if np.isfinite(g_down):
            r3 = min(r3, (0.8 * g_down * c1 * I1 + c2 * r2 * I2) / I3)
        r1 = (r3 * I3 - c2 * r2 * I2) / (c1 * I1)
        if not (c1 > 0 and c2 < 0 and r3 > 0 and r1 > r2):
            raise SynthesisError(f"point {i}: no admissible margins")
        u = shift / (r3 * I3)
        plan = [(h, r1, c1 * u), (h, r2, c2 * u), (h, -r3, u)]
    a = _unit(d, axis)
    for dur, r, force in plan:
        w = np.zeros(d)
        w[forced] = force
        if np.max(np.abs(w)) > MAGNITUDE_CAP:
            raise SynthesisError(f"point {i}: magnitude {np.max(np.abs(w)):.3g} exceeds cap")
        Xi, Pi = flow.X[i, axis], flow.P[i, axis]
        felt = (force * r).tolist() if r > 0 else [0.0] * len(forced)
        flow.apply(name, int(i), dur, w, a, (r - Xi - Pi, 0.0, Pi), felt)


def _sweep(flow, targets, T, t_end, axis, forced, name, check=None, max_slot=np.inf):
    """One isolating push per point on ``[flow.t, t_end]``, in equal slots no
    longer than ``max_slot`` (slots left unassigned are waited out; the slots
    are halved up to three times if no crossing-free order exists).

    The isolation coordinate is free during the sweep, so the visiting order
    is planned up front (see ``plan_order``).  ``check(flow, i, done)`` may
    reject a push, in which case its forcing time shrinks by 0.9 (at most 50
    times).
    """
    N = flow.X.shape[0]
    for _ in range(4):
        n_slots = max(N, math.ceil((t_end - flow.t) / max_slot - 1e-9))
        slot = (t_end - flow.t) / n_slots
        try:
            plan = plan_order(flow.X[:, axis], flow.P[:, axis], slot, n_slots)
            break
        except SynthesisError:
            max_slot = min(max_slot, slot) / 2
    else:
        raise SynthesisError("no visiting order avoids crossings, even with short slots")
    done = []
    for i in plan:
        slot_end = flow.t + slot
        if i < 0:
            flow.wait(slot)
            continue
        others = np.array([j for j in range(N) if j != i], dtype=int)
        g = _side_gaps(flow, i, others, axis, slot)
        below, above = others[g < 0], others[g > 0]
        L = slot
        for _ in range(51):
            trial = flow.copy()
            target_shift = targets[i, forced] - free_endpoint(trial.X[i, forced],
                                                              trial.P[i, forced], trial.t, T)
            isolate(trial, i, below, above, axis, forced, target_shift, L, T, name)
            if check is None or check(trial, i, done):
                break
            L *= 0.9
        else:
            raise SynthesisError(f"point {i}: distinct x+p sums not reached after 50 retries")
        flow.adopt(trial)
        done.append(i)
        flow.wait(slot_end - flow.t)
    return flow


def plan_order(z, pz, slot, n_slots):
    """Which point (or -1 for none) to push in each of ``n_slots`` consecutive
    slots of length ``slot``, for free coordinates ``z`` with velocities ``pz``.

    Point ``i`` may take slot ``k`` when no other point crosses it during that
    slot; its margin is the smallest gap to the others there.  The assignment
    maximizes the smallest margin (bottleneck matching by bisection).
    """
    N = len(z)
    S = z + pz
    M = np.empty((n_slots, N))
    dS = S[None, :] - S[:, None]
    dP = pz[None, :] - pz[:, None]
    off = ~np.eye(N, dtype=bool)
    for k in range(n_slots):
        g = _free_gap_min(dS, dP, k * slot, (k + 1) * slot)
        M[k] = np.where(off, g, np.inf).min(axis=1) if N > 1 else 1.0
    levels = np.unique(M[M > 0])
    if len(levels) == 0:
        raise SynthesisError("every point is crossed by another one in every slot")

    def matching(level):
        graph = csr_matrix((M >= level).astype(np.int8))
        match = maximum_bipartite_matching(graph, perm_type="column")
        return match, np.count_nonzero(match >= 0) == N

    lo, hi = 0, len(levels) - 1
    if not matching(levels[0])[1]:
        raise SynthesisError("no visiting order avoids crossings")
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if matching(levels[mid])[1]:
            lo = mid
        else:
            hi = mid - 1
    return [int(i) for i in matching(levels[lo])[0]]


def control_first_component(flow: _Flow, targets, t_end_phase, T, condsum_tol=1e-3):
    """Fix every ``x1(T)`` with pushes isolated on the second component.

    Forcing times shrink until each finished point's ``x1 + p1`` differs from
    the others by ``condsum_tol``, so the free first components are distinct.
    """
    def distinct_sums(trial, i, done):
        S = trial.X[:, 0] + trial.P[:, 0]
        return not done or np.min(np.abs(S[done] - S[i])) >= condsum_tol

    _sweep(flow, targets, T, t_end_phase, 1, [0], "FirstComponent", distinct_sums)
    S = np.sort(flow.X[:, 0] + flow.P[:, 0])
    if len(S) > 1 and np.min(np.diff(S)) < condsum_tol:
        raise SynthesisError("first-component sums x + p are not distinct")
    return flow


# -- phase 3 -------------------------------------------------------------------

def control_remaining_components(flow: _Flow, targets, T, t_end_phase=None):
    """Fix components ``2..d`` with pushes isolated on the free first component."""
    d = flow.d
    t_end_phase = 0.9 * T if t_end_phase is None else t_end_phase
    _sweep(flow, targets, T, t_end_phase, 0, list(range(1, d)), "RemainingComponents")
    flow.wait(T - flow.t)
    return flow


def synthesize(problem: ControlProblem, prep_fraction=0.1, seed=0, attempts=4,
               velocities=None, t0=0.0) -> SynthesisTrace:
    """Piecewise-constant controls steering every ``(x_i, 0)`` to ``y_i`` at ``T``.

    The only random choice is the hyperplane that spreads the second
    components; on failure up to ``attempts`` draws are tried.  Segment count
    is about ``6N + 4``.  ``velocities`` and ``t0`` let the construction start
    from moving points at a later time (used after compression); the targets
    are then reached at ``t0 + T``.
    """
    last_err = None
    for k in range(attempts):
        try:
            return _synthesize_once(problem, prep_fraction, seed + k, velocities, t0)
        except SynthesisError as exc:
            last_err = exc
    raise last_err


def _synthesize_once(problem, prep_fraction, seed, velocities=None, t0=0.0):
    T = t0 + problem.T
    flow = _Flow(problem.points, t0, velocities)
    prepare_dataset(problem, prep_fraction * problem.T, flow=flow, seed=seed)
    control_first_component(flow, problem.targets, t0 + problem.T / 2, T)
    control_remaining_components(flow, problem.targets, T, t0 + 0.9 * problem.T)
    err = np.max(np.abs(flow.X - problem.targets))
    if err > 1e-6 * max(1.0, np.max(np.abs(flow.X))):
        raise SynthesisError(f"closed-form endpoint misses targets by {err:.3g}")
    return SynthesisTrace(flow.builder.build(), flow.log, flow.X.copy(), flow.P.copy())


# -- compression and universal approximation ------------------------------------

def linear_response(stiffness, t):
    """Propagator of ``y'' + y' + stiffness*y = 0`` over ``t``, acting on ``(y, p)``."""
    return expm(np.array([[0.0, 1.0], [-stiffness, -1.0]]) * t)


def compression_factor(stiffness, t):
    """Ratio ``y(t) / y(0)`` for a point starting at rest on the active side."""
    return float(linear_response(stiffness, t)[0, 0])


def _duration_for(fn, target):
    """Smallest ``t > 0`` with ``fn(t) == target`` for ``fn`` monotone in ``t``."""
    hi = 1.0
    while (fn(hi) - target) * (fn(0.0) - target) > 0:
        hi *= 2
        if hi > 1e4:
            raise ValueError("target factor is out of reach")
    return brentq(lambda t: fn(t) - target, 0.0, hi, xtol=1e-13, rtol=1e-13)


def compressive_schedule(component, box_low, box_high, shrink, d=None, stiffness=0.2,
                         anchor=0.0, t0=0.0) -> ControlSchedule:
    """One segment contracting the ``component``-th extent of a box by ``shrink``.

    The active half-space is ``x[component] > anchor``; inside it the component
    obeys ``y'' + y' + stiffness*y = 0`` with ``y = x - anchor`` (control weight
    ``-stiffness``), an overdamped attractor for ``stiffness`` in ``(0, 1/4)``.
    Starting at rest, every point keeps ``y > 0`` and ``y(t) = y(0)*phi(t)``
    with ``phi`` decreasing, so the duration solves ``phi(t) = shrink`` exactly.
    """
    lo = np.atleast_1d(np.asarray(box_low, dtype=float))
    hi = np.atleast_1d(np.asarray(box_high, dtype=float))
    d = lo.shape[0] if d is None else d
    if not 0 < shrink < 1:
        raise ValueError("shrink factor must lie in (0, 1)")
    if eigen_regime(stiffness).classification is not Regime.ATTRACTOR:
        raise ValueError("stiffness must lie in (0, 1/4) for a compressive flow")
    if not 0 <= component < d:
        raise ValueError("component out of range")
    if lo[component] <= anchor or hi[component] < lo[component]:
        raise ValueError("box must lie strictly inside the active half-space")
    dur = _duration_for(lambda t: compression_factor(stiffness, t), shrink)
    builder = ScheduleBuilder(Architecture.MOMENTUM, d, d, t0)
    builder.add(dur, PerceptronControl(_unit(d, component, -stiffness), _unit(d, component),
                                       -anchor))
    return builder.build()


def _free_matrix(t):
    return np.array([[1.0, -math.expm1(-t)], [0.0, math.exp(-t)]])


def _settled(v):
    """Free-endpoint slope of a ``(position, velocity)`` differential."""
    return v[0] + v[1]


def grid_cells(low, high, shape):
    """Boxes of a regular grid: ``(lows, highs)`` arrays of shape ``(n, d)``."""
    low, high = np.asarray(low, float), np.asarray(high, float)
    edges = [np.linspace(l, h, n + 1) for l, h, n in zip(low, high, shape)]
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), -1).reshape(-1, len(shape))
    lows = np.array([[edges[k][j] for k, j in enumerate(row)] for row in idx])
    highs = np.array([[edges[k][j + 1] for k, j in enumerate(row)] for row in idx])
    return lows, highs


@dataclass
class ApproximationResult:
    schedule: ControlSchedule
    T_min: float
    compression_time: float
    shrink: float
    representatives: np.ndarray
    predicted_error: float
    trace: SynthesisTrace | None = None


class HorizonTooShort(ValueError):
    """The requested horizon is below the computed minimal time."""

    def __init__(self, T_total, T_min):
        super().__init__(f"horizon {T_total:.4g} is below the required minimum {T_min:.4g}")
        self.T_min = T_min


def _compression_stage(lows, highs, shrink, stiffness, expand_stiffness, inset, settle):
    """Schedule shrinking every cell interior by ``shrink`` along each axis.

    Per axis, the distinct cell intervals are visited bottom to top: compress
    everything above the lower inset edge, let velocities settle, then expand
    everything above the upper inset edge back to unit slope.  Slopes are
    tracked as ``(position, velocity)`` differentials; hyperplanes sit at the
    tracked images of the inset edges.
    """
    n, d = lows.shape
    builder = ScheduleBuilder(Architecture.MOMENTUM, d, d, 0.0)
    for axis in range(d):
        brk = np.unique(np.concatenate([lows[:, axis], highs[:, axis]]))
        m = len(brk) - 1
        for lo, hi in zip(lows[:, axis], highs[:, axis]):
            if np.searchsorted(brk, hi) - np.searchsorted(brk, lo) != 1:
                raise ValueError("cells must form a tensor-product grid")
        width = np.diff(brk)
        # reference points whose images carry the hyperplanes
        ref = np.concatenate([brk[:-1] + inset * width / 2, brk[1:] - inset * width / 2])
        z = ref.copy()
        pz = np.zeros_like(z)
        slopes = np.tile([1.0, 0.0], (m, 1))
        e = _unit(d, axis)

        def run(dur, weight, plane):
            nonlocal z, pz
            if weight == 0:
                F = _free_matrix(dur)
                z, pz = F[0, 0] * z + F[0, 1] * pz, F[1, 1] * pz
                builder.wait(dur)
                return
            M = linear_response(-weight, dur)
            F = _free_matrix(dur)
            act = z > plane
            y = z - plane
            zn = np.where(act, plane + M[0, 0] * y + M[0, 1] * pz, F[0, 0] * z + F[0, 1] * pz)
            pn = np.where(act, M[1, 0] * y + M[1, 1] * pz, F[1, 1] * pz)
            z, pz = zn, pn
            builder.add(dur, PerceptronControl(e * weight, e, -plane))

        for k in range(m):
            v = slopes[k]
            tc = _duration_for(lambda t: _settled(linear_response(stiffness, t) @ v), shrink)
            plane = z[k]
            M, F = linear_response(stiffness, tc), _free_matrix(tc)
            slopes = np.array([M @ s if j >= k else F @ s for j, s in enumerate(slopes)])
            run(tc, -stiffness, plane)
            F = _free_matrix(settle)
            slopes = slopes @ F.T
            run(settle, 0.0, None)
            if k == m - 1:
                break
            u = slopes[k + 1]
            te = _duration_for(lambda t: _settled(linear_response(-expand_stiffness, t) @ u),
                               1.0)
            plane = z[m + k]
            M, F = linear_response(-expand_stiffness, te), _free_matrix(te)
            slopes = np.array([M @ s if j > k else F @ s for j, s in enumerate(slopes)])
            run(te, expand_stiffness, plane)
    return builder.build()


def approximate_function(lows, highs, values, T_total=None, tolerance=None, T_sync=10.0,
                         stiffness=0.24, expand_stiffness=2.0, inset=0.04, settle=6.0,
                         shrink_start=1e-2, n_steps_per_unit_time=2000):
    """Flow map sending each grid cell close to its value.

    Cells (``lows``, ``highs``) form a tensor-product grid with one target
    ``values[k]`` in ``R^d`` each.  Cell interiors, inset by ``inset`` of the
    width, are compressed until the synthesized flow's Jacobian at the cell
    centres times the compressed half-widths falls below ``tolerance``
    (default ``0.05 * max|value| * h / extent`` with ``h`` the largest cell
    side).  The centres are then steered exactly to the values.  The total time
    needed is ``T_min``; a longer ``T_total`` is met by waiting at the start.
    """
    lows, highs = np.atleast_2d(lows).astype(float), np.atleast_2d(highs).astype(float)
    values = np.atleast_2d(values).astype(float)
    n, d = lows.shape
    if values.shape != (n, d):
        raise ValueError("values must hold one d-vector per cell")
    if tolerance is None:
        h = np.max(highs - lows)
        extent = np.max(np.max(highs, 0) - np.min(lows, 0))
        tolerance = 0.05 * max(np.max(np.abs(values)), 1e-12) * h / extent
    centres = (lows + highs) / 2
    half = (highs - lows) / 2 * (1 - inset)
    shrink = shrink_start
    for _ in range(12):
        comp = _compression_stage(lows, highs, shrink, stiffness, expand_stiffness, inset, settle)
        tc = comp.T
        Xc, Pc = reference_endpoints(_momentum_spec(d, 0.0, tc), comp, centres, None,
                                     n_steps_per_unit_time=n_steps_per_unit_time)
        problem = ControlProblem(Xc, values, T_sync)
        trace = synthesize(problem, velocities=Pc, t0=tc)
        # Jacobian of the synthesized part by central differences along each axis
        eps = 1e-6 * max(1.0, np.max(np.abs(Xc)))
        probes = np.concatenate([Xc + s * eps * _unit(d, k) for k in range(d) for s in (1, -1)])
        vel = np.tile(Pc, (2 * d, 1))
        Xe, _ = reference_endpoints(_momentum_spec(d, tc, tc + T_sync), trace.schedule, probes, vel,
                                    n_steps_per_unit_time=n_steps_per_unit_time)
        Xe = Xe.reshape(2 * d, n, d)
        err = np.zeros(n)
        for k in range(d):
            col = (Xe[2 * k] - Xe[2 * k + 1]) / (2 * eps)
            err += np.linalg.norm(col, axis=1) * shrink * half[:, k]
        predicted = float(np.max(err))
        if predicted <= tolerance:
            break
        shrink *= 0.1
    else:
        raise SynthesisError("compression could not reach the requested tolerance")
    schedule = comp.then(trace.schedule)
    T_min = schedule.T
    if T_total is not None:
        if T_total < T_min:
            raise HorizonTooShort(T_total, T_min)
        lead = T_total - T_min
        if lead > 0:
            pre = ScheduleBuilder(Architecture.MOMENTUM, d, d, 0.0)
            pre.wait(lead)
            schedule = pre.build().then(schedule.shifted(lead))
    return ApproximationResult(schedule, T_min, tc, shrink, Xc, predicted, trace)


def approximation_error(result: ApproximationResult, samples, targets,
                        n_steps_per_unit_time=2000):
    """Root-mean-square deviation of the flow map from ``targets`` over ``samples``
    (a Monte-Carlo L2 error up to the domain volume) and the RMS norm of the targets."""
    samples = np.atleast_2d(samples).astype(float)
    d = samples.shape[1]
    sched = result.schedule
    X, _ = reference_endpoints(_momentum_spec(d, sched.t0, sched.T), sched, samples, None,
                               n_steps_per_unit_time=n_steps_per_unit_time)
    dev = np.sqrt(np.mean(np.sum((X - targets) ** 2, axis=1)))
    return float(dev), float(np.sqrt(np.mean(np.sum(np.asarray(targets) ** 2, axis=1))))


def _momentum_spec(d, t0, T):
    return ModelSpec(Architecture.MOMENTUM, d, d, t0=t0, T=T)
