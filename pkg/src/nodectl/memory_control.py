"""Constructive controllers for the memory NODE.

``x' = W sigma(A x + C p + b1) + b2``,  ``p' = u sigma(<d, x> + f)``.

Every segment built here moves one group of coordinates while the hyperplane
it uses only reads coordinates that stay still (or, during tracking, move
along known straight lines).  Each point therefore moves along a straight line
at a rate fixed by its own side of the hyperplane, which keeps the synthesis
exact: the predicted endpoints are closed-form sums and the reference
integrator reproduces them to rounding error.

Building blocks:

* *separate*: shear one state coordinate by an amount that depends on all the
  other coordinates, making its values distinct across points;
* *raise / isolate*: lift the memory of every other point above a chosen
  point's memory using hyperplanes on the state just left and right of it,
  then move that point's state alone with a hyperplane on the memory;
* *sweep*: visit points in increasing order of one state coordinate and set
  their memories one at a time; a hyperplane just below the visited point
  keeps every already visited point frozen.

The tracking controller runs the simultaneous controller on a warm-up window,
then drives the states along piecewise linear surrogates using one memory
block as a velocity source while the sweep rewrites the other block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (Architecture, ControlSchedule, MemoryControl, ModelSpec,
                       ScheduleBuilder, run_schedule)

SEPARATION_FRACTION = 0.01
MEMORY_MARGIN = 0.5
DELTA_FLOOR = 1e-6


class MemorySynthesisError(ValueError):
    pass


class CoincidingTargetsError(MemorySynthesisError):
    """Two target pairs coincide, so distinct trajectories cannot both reach them."""


class SurrogateError(ValueError):
    def __init__(self, msg, achieved):
        super().__init__(msg)
        self.achieved = achieved


def _distinct_rows(M, what, exc=MemorySynthesisError):
    M = np.asarray(M)
    for i in range(len(M)):
        for j in range(i):
            if np.array_equal(M[i], M[j]):
                raise exc(f"{what} {j} and {i} coincide")


@dataclass
class MemoryControlProblem:
    """Steer ``(x_i, p_i)`` to ``(y_i, phi_i)`` simultaneously over ``[0, T]``."""

    initial_x: np.ndarray
    initial_p: np.ndarray
    target_x: np.ndarray
    target_p: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        self.initial_x = np.atleast_2d(np.asarray(self.initial_x, dtype=float))
        n, d = self.initial_x.shape
        self.target_x = np.asarray(self.target_x, dtype=float).reshape(n, d)
        tp = np.asarray(self.target_p, dtype=float)
        d_p = tp.size // n if n else 0
        self.target_p = tp.reshape(n, d_p)
        self.initial_p = np.asarray(self.initial_p, dtype=float).reshape(n, d_p)
        if d_p < 1:
            raise ValueError("memory dimension must be positive")
        for arr in (self.initial_x, self.initial_p, self.target_x, self.target_p):
            if not np.all(np.isfinite(arr)):
                raise ValueError("problem data must be finite")
        if not self.T > 0:
            raise ValueError("horizon must be positive")
        _distinct_rows(np.hstack([self.initial_x, self.initial_p]), "initial pairs")
        _distinct_rows(np.hstack([self.target_x, self.target_p]),
                       "target pairs (only approximate control is possible; perturb one)",
                       CoincidingTargetsError)

    @property
    def N(self):
        return self.initial_x.shape[0]

    @property
    def d(self):
        return self.initial_x.shape[1]

    @property
    def d_p(self):
        return self.initial_p.shape[1]

    @classmethod
    def from_dict(cls, dct):
        n = len(dct["points"])
        d_p = int(dct["d_p"])
        p0 = dct.get("memories", np.zeros((n, d_p)))
        return cls(dct["points"], p0, dct["targets"], dct["target_memories"],
                   float(dct.get("T", 1.0)))

    def to_dict(self):
        return {"d": self.d, "d_p": self.d_p, "T": self.T,
                "points": self.initial_x.tolist(), "memories": self.initial_p.tolist(),
                "targets": self.target_x.tolist(),
                "target_memories": self.target_p.tolist()}


@dataclass
class MemoryPhase:
    name: str
    t_start: float
    t_end: float
    point: int | None = None
    coords: tuple = ()

    def to_dict(self):
        return {"name": self.name, "t_start": self.t_start, "t_end": self.t_end,
                "point": self.point, "coords": list(self.coords)}


@dataclass
class MemoryTrace:
    schedule: ControlSchedule
    phases: list = field(default_factory=list)
    predicted_x: np.ndarray | None = None
    predicted_p: np.ndarray | None = None

    def phase(self, name):
        return [ph for ph in self.phases if ph.name == name]


def _relu(z):
    return np.maximum(z, 0.0)


class _Plan:
    """Moves of unit duration applied in closed form to all points."""

    def __init__(self, X, P):
        self.d = X.shape[1]
        self.d_p = P.shape[1]
        self.Z = np.hstack([X, P]).astype(float)
        self.moves = []
        self.marks = []

    @property
    def X(self):
        return self.Z[:, :self.d]

    @property
    def P(self):
        return self.Z[:, self.d:]

    def mark(self, name, point=None, coords=()):
        self.marks.append((len(self.moves), name, point, tuple(coords)))

    def x_move(self, k, a_row, c_row, b1, w):
        d, dp = self.d, self.d_p
        a_row = np.asarray(a_row, float)
        c_row = np.asarray(c_row, float)
        if a_row[k] != 0.0:
            raise AssertionError("shear hyperplane must not read the moving coordinate")
        rate = w * _relu(self.Z[:, :d] @ a_row + self.Z[:, d:] @ c_row + b1)
        self.Z[:, k] += rate
        W = np.zeros((d, d))
        W[k, 0] = w
        A = np.zeros((d, d))
        A[0] = a_row
        C = np.zeros((d, dp))
        C[0] = c_row
        b = np.zeros(d)
        b[0] = b1
        self.moves.append(MemoryControl(W, A, C, b, np.zeros(d), np.zeros(dp),
                                        np.zeros(d), 0.0))

    def p_move(self, u, d_vec, f):
        d, dp = self.d, self.d_p
        u = np.asarray(u, float)
        d_vec = np.asarray(d_vec, float)
        rate = _relu(self.Z[:, :d] @ d_vec + f)
        self.Z[:, d:] += np.outer(rate, u)
        self.moves.append(MemoryControl(np.zeros((d, d)), np.zeros((d, d)),
                                        np.zeros((d, dp)), np.zeros(d), np.zeros(d),
                                        u, d_vec, f))

    def segments(self, t0, span):
        """Spread the moves evenly over ``[t0, t0 + span]``; rates scale accordingly."""
        moves = self.moves or [MemoryControl.zeros(self.d, self.d_p)]
        dur = span / len(moves)
        out = [(dur, m.with_(W=m.W / dur, b2=m.b2 / dur, u=m.u / dur)) for m in moves]
        phases = []
        for n, (start, name, point, coords) in enumerate(self.marks):
            stop = self.marks[n + 1][0] if n + 1 < len(self.marks) else len(self.moves)
            phases.append(MemoryPhase(name, t0 + start * dur, t0 + stop * dur, point, coords))
        return out, phases


def _min_gap(v):
    if len(v) < 2:
        return math.inf
    return float(np.min(np.diff(np.sort(v))))


def _scale(*arrays):
    return max(1.0, max(float(np.ptp(a)) for a in arrays))


def _shear_rates(Z, k, rng):
    """Random hyperplane on every coordinate except ``k``, offset to be active everywhere."""
    alpha = rng.standard_normal(Z.shape[1])
    alpha[k] = 0.0
    alpha /= np.linalg.norm(alpha) or 1.0
    vals = Z @ alpha
    b = 1.0 - vals.min()
    return alpha, b, vals + b


def _best_shear(base, rates, sign):
    span = _scale(base) / max(float(np.ptp(rates)), 1e-3 * float(np.max(np.abs(rates))))
    amounts = np.concatenate([[0.0], span * np.geomspace(1e-2, 10.0, 41)])
    gaps = np.array([_min_gap(base + sign * s * rates) for s in amounts])
    best = gaps.max()
    pick = int(np.argmax(gaps >= 0.5 * best))
    return amounts[pick], gaps[pick]


def _separate(plan, k, rng, name="separate"):
    """Make state coordinate ``k`` distinct across points with one shear move."""
    x = plan.X[:, k]
    if _min_gap(x) >= SEPARATION_FRACTION * _scale(x):
        return
    for _ in range(8):
        alpha, b, rates = _shear_rates(plan.Z, k, rng)
        amount, gap = _best_shear(x, rates, +1.0)
        if gap > 1e-9 * _scale(x):
            break
    else:
        raise MemorySynthesisError(f"could not separate state coordinate {k}")
    if amount == 0.0 or gap <= _min_gap(x):
        return
    plan.mark(name, coords=(k,))
    d = plan.d
    plan.x_move(k, alpha[:d], alpha[d:], b, amount)


def _isolate_and_move(plan, j, k, m, dest):
    """Lift every other memory coordinate ``m`` above point ``j`` and move its state ``k``."""
    d = plan.d
    cur = plan.X[:, k].copy()
    g = cur - cur[j]
    others = np.arange(len(cur)) != j
    if others.any():
        eps = 0.5 * np.min(np.abs(g[others]))
        for side in (1.0, -1.0):
            need = plan.P[j, m] + 2 * MEMORY_MARGIN - plan.P[:, m]
            sel = others & (side * g > 0)
            if not (sel & (need > 0)).any():
                continue
            # a ramp from eps to the nearest point, then flat: every point on
            # this side is lifted by the same amount
            lift = float(np.max(need[sel]))
            near = float(np.min(side * g[sel]))
            slope = lift / (near - eps)
            u = np.zeros(plan.d_p)
            u[m] = slope
            plan.p_move(u, side * np.eye(d)[k], -side * cur[j] - eps)
            plan.p_move(-u, side * np.eye(d)[k], -side * cur[j] - near)
    c_row = np.zeros(plan.d_p)
    c_row[m] = -1.0
    plan.x_move(k, np.zeros(d), c_row, plan.P[j, m] + MEMORY_MARGIN,
                (dest - cur[j]) / MEMORY_MARGIN)


def _steer_states(plan, k, m, goal):
    """Drive state coordinate ``k`` of every point to ``goal``, lifting memory ``m``."""
    goal = np.asarray(goal, float)
    n = len(goal)
    undone = list(range(n))
    scale = _scale(plan.X[:, k], goal)
    detours = 0
    while undone:
        cur = plan.X[:, k]
        best, clear = undone[0], -1.0
        for j in undone:
            rest = [cur[l] for l in undone if l != j]
            c = min(abs(goal[j] - v) for v in rest) if rest else math.inf
            if c > clear:
                best, clear = j, c
        j = best
        if clear < 1e-3 * scale:
            # landing here would stack two unvisited points; park above everything first
            detours += 1
            if detours > 2 * n:
                raise MemorySynthesisError("state steering did not converge")
            dest = max(cur.max(), goal.max()) + 0.1 * scale
        else:
            undone.remove(j)
            dest = goal[j]
            if dest == cur[j]:
                continue
        plan.mark("steer", point=j, coords=(k,))
        _isolate_and_move(plan, j, k, m, dest)


def _sweep(plan, key, coords, goal, name):
    """Set memories ``coords`` of each point to ``goal`` in increasing order of state ``key``."""
    d = plan.d
    x = plan.X[:, key].copy()
    gap = _min_gap(x)
    if gap <= 0:
        raise MemorySynthesisError(f"state coordinate {key} is not distinct")
    eps = 0.5 * gap if math.isfinite(gap) else 1.0
    coords = list(coords)
    for i in np.argsort(x):
        delta = goal[i] - plan.P[i, coords]
        if not np.any(delta):
            continue
        u = np.zeros(plan.d_p)
        u[coords] = delta / eps
        plan.mark(name, point=int(i), coords=tuple(coords))
        # ramp over [x_i - eps, x_i] then flat, so points above shift by delta too
        plan.p_move(u, np.eye(d)[key], -(x[i] - eps))
        plan.p_move(-u, np.eye(d)[key], -x[i])


def _plan_problem(problem, rng):
    d, dp = problem.d, problem.d_p
    plan = _Plan(problem.initial_x, problem.initial_p)

    # Surplus memories first, keyed on the first state coordinate.
    if dp > d:
        _separate(plan, 0, rng)
        surplus = list(range(d, dp))
        _sweep(plan, 0, surplus, problem.target_p[:, surplus], "surplus")

    # The final sweep reads one state coordinate; if no target coordinate is distinct
    # enough, the last move is a shear whose preimage of the targets is.
    Y = problem.target_x.copy()
    gaps = [_min_gap(Y[:, k]) for k in range(d)]
    key = int(np.argmax(gaps))
    final_shear = None
    if gaps[key] < SEPARATION_FRACTION * _scale(Y[:, key]):
        key = 0
        Zf = np.hstack([Y, problem.target_p])
        for _ in range(8):
            alpha, b, rates = _shear_rates(Zf, key, rng)
            amount, gap = _best_shear(Y[:, key], rates, -1.0)
            if gap > 1e-9 * _scale(Y[:, key]):
                break
        else:
            raise MemorySynthesisError("could not separate the targets")
        Y[:, key] -= amount * rates
        final_shear = (alpha, b, amount)

    partner = [min(k, dp - 1) for k in range(d)]
    for k in range(d):
        _separate(plan, k, rng)
        _steer_states(plan, k, partner[k], Y[:, k])

    own = list(range(min(d, dp)))
    _sweep(plan, key, own, problem.target_p[:, own], "memory")

    if final_shear is not None:
        alpha, b, amount = final_shear
        plan.mark("unshear", coords=(key,))
        plan.x_move(key, alpha[:d], alpha[d:], b, amount)
    return plan


def memory_control_trace(problem: MemoryControlProblem, t0=0.0, seed=0) -> MemoryTrace:
    rng = np.random.default_rng(seed)
    plan = _plan_problem(problem, rng)
    segs, phases = plan.segments(t0, problem.T)
    b = ScheduleBuilder(Architecture.MEMORY, problem.d, problem.d_p, t0)
    for dur, ctrl in segs:
        b.add(dur, ctrl)
    err = max(np.max(np.abs(plan.X - problem.target_x)), np.max(np.abs(plan.P - problem.target_p)))
    if err > 1e-8 * _scale(problem.target_x, problem.target_p):
        raise MemorySynthesisError(f"closed-form endpoint misses targets by {err:.3g}")
    return MemoryTrace(b.build(), phases, plan.X.copy(), plan.P.copy())


def memory_simultaneous_control(problem: MemoryControlProblem, t0=0.0, seed=0) -> ControlSchedule:
    """Schedule on ``[t0, t0 + T]`` steering every state-memory pair to its target.

    States are steered coordinate by coordinate, each paired with one memory
    coordinate (the last memory coordinate is shared when ``d > d_p``); memory
    coordinates without a state partner are set first, and the paired ones
    last.
    """
    return memory_control_trace(problem, t0, seed).schedule


def pairwise_simultaneous_control(problem: MemoryControlProblem, seed=0) -> ControlSchedule:
    """Scalar state and scalar memory (the plane case)."""
    if (problem.d, problem.d_p) != (1, 1):
        raise ValueError("pairwise control needs d = d_p = 1")
    return memory_simultaneous_control(problem, seed=seed)


def memory_spec(d, d_p, t0=0.0, T=1.0):
    return ModelSpec(Architecture.MEMORY, d, d_p, t0=t0, T=T)


# -- tracking -------------------------------------------------------------------

@dataclass
class TrackingTarget:
    """A sampled curve and its continuous piecewise linear surrogate.

    ``intercepts[k]`` is the surrogate value at ``breaks[k]``, so on interval
    ``k`` the surrogate is ``intercepts[k] + slopes[k] * (t - breaks[k])``.
    """

    source: np.ndarray
    times: np.ndarray
    curve: np.ndarray
    breaks: np.ndarray
    slopes: np.ndarray
    intercepts: np.ndarray
    warmup: float = 1.0
    tolerance: float = math.inf
    achieved: float = 0.0

    @property
    def n_intervals(self):
        return len(self.slopes)

    def evaluate(self, t):
        t = np.asarray(t, float)
        k = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, self.n_intervals - 1)
        return self.intercepts[k] + self.slopes[k] * (t - self.breaks[k])[..., None]


def build_surrogate(times, curves, sources, n_intervals=8, tolerance=0.05, warmup=1.0,
                    slope_gap=None, max_doublings=10):
    """Piecewise linear surrogates on a shared uniform partition.

    Node values interpolate the samples.  On every interval the first-component
    slopes are then pushed apart by at least ``slope_gap`` (moving right-hand
    node values only), so that no two surrogates run parallel.  The partition
    is doubled until the sup distance to the samples is within ``tolerance``.
    """
    times = np.asarray(times, float)
    Y = np.asarray(curves, float)
    if Y.ndim == 2:
        Y = Y[..., None]
    n, n_t, d = Y.shape
    src = np.asarray(sources, float).reshape(n, -1)
    if n_t != len(times) or n_t < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("curves must be sampled on a common increasing time grid")
    if not np.all(np.isfinite(Y)):
        raise ValueError("curves must be finite")
    m = int(n_intervals)
    achieved = math.inf
    for _ in range(max_doublings + 1):
        breaks = np.linspace(times[0], times[-1], m + 1)
        L = breaks[1] - breaks[0]
        gap = slope_gap if slope_gap is not None else tolerance / (8.0 * max(n, 1) * L)
        nodes = np.stack([[np.interp(breaks, times, Y[i, :, c]) for c in range(d)]
                          for i in range(n)]).transpose(0, 2, 1)   # (n, m+1, d)
        for k in range(m):
            s = (nodes[:, k + 1, 0] - nodes[:, k, 0]) / L
            order = np.argsort(s, kind="stable")
            for r in range(1, n):
                lo, hi = order[r - 1], order[r]
                if s[hi] < s[lo] + gap:
                    s[hi] = s[lo] + gap
            nodes[:, k + 1, 0] = nodes[:, k, 0] + s * L
        slopes = np.diff(nodes, axis=1) / L
        out = [TrackingTarget(src[i], times, Y[i], breaks, slopes[i], nodes[i, :-1], warmup,
                              tolerance) for i in range(n)]
        achieved = max(float(np.max(np.linalg.norm(t.evaluate(times) - t.curve, axis=-1)))
                       for t in out)
        if achieved <= tolerance:
            for t in out:
                t.achieved = achieved
            return out
        m *= 2
    raise SurrogateError(f"surrogate error {achieved:.3g} above {tolerance} after "
                         f"{max_doublings} doublings", achieved)


@dataclass
class TrackingTrace:
    schedule: ControlSchedule
    phases: list
    warmup: MemoryTrace
    velocity_offsets: np.ndarray   # b2 per interval
    memory_targets: np.ndarray     # (N, n_intervals, d) active-block memories
    windows: np.ndarray            # (n_intervals, 2) reconfiguration windows


def _relu_integral(a0, a1, h):
    """Integral over ``[0, h]`` of relu of the line from ``a0`` to ``a1``."""
    a0, a1 = np.broadcast_arrays(np.asarray(a0, float), np.asarray(a1, float))
    both = (a0 >= 0) & (a1 >= 0)
    none = (a0 <= 0) & (a1 <= 0)
    top = np.maximum(a0, a1)
    diff = np.abs(a1 - a0)
    cross = np.where(diff > 0, h * top ** 2 / (2 * np.where(diff > 0, diff, 1.0)), 0.0)
    return np.where(both, 0.5 * h * (a0 + a1), np.where(none, 0.0, cross))


def _ordered_window(x0, slope, t_a, t_b):
    """Middle third of the longest sub-interval where the first components do not cross."""
    cuts = [t_a, t_b]
    n = len(x0)
    for i in range(n):
        for j in range(i):
            ds = slope[i] - slope[j]
            if ds != 0:
                tc = t_a - (x0[i] - x0[j]) / ds
                if t_a < tc < t_b:
                    cuts.append(tc)
    cuts = np.sort(cuts)
    k = int(np.argmax(np.diff(cuts)))
    lo, hi = cuts[k], cuts[k + 1]
    third = (hi - lo) / 3.0
    return lo + third, hi - third


def plan_tracking(targets, d_p=None, seed=0) -> TrackingTrace:
    """Tracking schedule on ``[-warmup, T]`` for surrogates sharing one partition."""
    if not targets:
        raise ValueError("no targets")
    d = targets[0].source.size
    dp = 2 * d if d_p is None else int(d_p)
    if dp < 2 * d:
        raise ValueError(f"tracking needs a memory of dimension at least 2d = {2 * d}")
    breaks = targets[0].breaks
    for t in targets:
        if not np.array_equal(t.breaks, breaks):
            raise ValueError("surrogates must share one partition")
    tau = targets[0].warmup
    if not tau > 0:
        raise ValueError("warm-up length must be positive")
    n = len(targets)
    nt = len(breaks) - 1
    P = np.stack([t.slopes for t in targets])
    B = np.stack([t.intercepts for t in targets])
    b2 = P.min(axis=0) - 1.0
    q = P - b2[None]
    blocks = [slice(0, d), slice(d, 2 * d)]

    mem0 = np.zeros((n, dp))
    mem0[:, blocks[0]] = q[:, 0]
    src = np.stack([t.source for t in targets])
    warm = memory_control_trace(
        MemoryControlProblem(src, np.zeros((n, dp)), B[:, 0], mem0, tau), t0=-tau, seed=seed)
    builder = ScheduleBuilder(Architecture.MEMORY, d, dp, -tau)
    for seg in warm.schedule.segments:
        builder.add(seg.duration, seg.params)
    phases = list(warm.phases)
    Pm = warm.predicted_p.copy()
    X = warm.predicted_x.copy()
    I = np.eye(d)
    windows = np.full((nt, 2), np.nan)

    for k in range(nt):
        a = k % 2
        C = np.zeros((d, dp))
        C[:, blocks[a]] = I
        drive = MemoryControl(I, np.zeros((d, d)), C, np.zeros(d), b2[k], np.zeros(dp),
                              np.zeros(d), 0.0)
        t_a, t_b = breaks[k], breaks[k + 1]
        phases.append(MemoryPhase("drive", t_a, t_b, None, tuple(range(d))))
        X0 = X.copy()
        if k + 1 < nt:
            idle = blocks[1 - a]
            w0, w1 = _ordered_window(X0[:, 0], P[:, k, 0], t_a, t_b)
            windows[k] = (w0, w1)
            x_w0 = X0[:, 0] + P[:, k, 0] * (w0 - t_a)
            x_w1 = X0[:, 0] + P[:, k, 0] * (w1 - t_a)
            order = np.argsort(x_w0)
            # margin of each point: half its smallest gap to the point just below
            below = np.minimum(np.diff(x_w0[order]), np.diff(x_w1[order]))
            margins = 0.5 * np.concatenate([[max(1.0, 2 * below.max(initial=0.0))], below])
            if margins.min() < DELTA_FLOOR:
                raise MemorySynthesisError(
                    f"interval {k}: first components only {2 * margins.min():.3g} apart; "
                    "use more intervals or fewer curves")
            if w0 > t_a:
                builder.add(w0 - t_a, drive)
            h = (w1 - w0) / n
            half = 0.5 * h
            for r, i in enumerate(order):
                delta = margins[r]
                s0 = w0 + r * h
                u = np.zeros(dp)
                u[idle] = (q[i, k + 1] - Pm[i, idle]) / (delta * half)
                # ramp on [x_i - delta, x_i] for the first half, then remove the
                # part above x_i: points above move by nearly the same amount
                for part, (lift, sign) in enumerate(((delta, 1.0), (0.0, -1.0))):
                    t_part = s0 + part * half
                    xs = X0[:, 0] + P[:, k, 0] * (t_part - t_a)
                    ctrl = drive.with_(u=sign * u, d_vec=I[0], f=-(xs[i] - lift),
                                       f_rate=-P[i, k, 0])
                    start = xs - xs[i] + lift
                    end = start + (P[:, k, 0] - P[i, k, 0]) * half
                    Pm[:, idle] += sign * np.outer(_relu_integral(start, end, half), u[idle])
                    builder.add(half, ctrl)
                Pm[i, idle] = q[i, k + 1]
                phases.append(MemoryPhase("reconfigure", s0, s0 + h, int(i),
                                          tuple(range(idle.start, idle.stop))))
            if t_b > w1:
                builder.add(t_b - w1, drive)
        else:
            builder.add(t_b - t_a, drive)
        X = X0 + P[:, k] * (t_b - t_a)
    return TrackingTrace(builder.build(), phases, warm, b2, q, windows)


def tracking_control(targets, d_p=None, seed=0) -> ControlSchedule:
    return plan_tracking(targets, d_p, seed).schedule


def tracking_error(schedule, targets, n_steps_per_unit_time=200):
    """Sup over the sample grid of ``|x_i(t) - y_i(t)|`` for each curve (reference RK4)."""
    d = targets[0].source.size
    spec = memory_spec(d, schedule.d_p, schedule.t0, schedule.T)
    X0 = np.stack([t.source for t in targets])
    times, X, _ = run_schedule(spec, schedule, X0, record=True,
                               n_steps_per_unit_time=n_steps_per_unit_time)
    out = []
    for i, t in enumerate(targets):
        path = np.stack([np.interp(t.times, times, X[:, i, c]) for c in range(d)], axis=-1)
        out.append(float(np.max(np.linalg.norm(path - t.curve, axis=-1))))
    return np.array(out)


# -- universal tracking ---------------------------------------------------------

@dataclass
class UniversalTrackingResult:
    schedule: ControlSchedule
    representatives: np.ndarray     # compressed images of the cell centres
    targets: list
    shrink: float
    inset: float
    compression_time: float
    deviation: float                # worst distance of a compressed cell corner from its centre


def _tensor_edges(lows, highs):
    lows = np.atleast_2d(np.asarray(lows, float))
    highs = np.atleast_2d(np.asarray(highs, float))
    if lows.shape != highs.shape or np.any(highs <= lows):
        raise ValueError("cells need matching lows < highs")
    edges = [np.unique(np.concatenate([lows[:, j], highs[:, j]])) for j in range(lows.shape[1])]
    if np.prod([len(e) - 1 for e in edges]) != len(lows):
        raise ValueError("cells must form a tensor grid")
    return edges


def _compression_ops(edges, shrink, inset):
    """``(axis, threshold, factor)`` triples: ``x -> thr + factor (x - thr)`` above ``thr``.

    Along every axis each cell's interior (inset on both sides) is squeezed
    toward its lower inset edge and everything above the squeezed cell is
    stretched back; the net effect on the rest of the domain is a translation.
    """
    ops = []
    for j, e in enumerate(edges):
        cur = np.array(e, float)
        for c in range(len(cur) - 1):
            lo, hi = cur[c], cur[c + 1]
            lo_in, hi_in = lo + inset * (hi - lo), hi - inset * (hi - lo)
            ops.append((j, lo_in, shrink))
            ops.append((j, lo_in + shrink * (hi_in - lo_in), 1.0 / shrink))
            cur[c + 1:] -= (1.0 - shrink) * (hi_in - lo_in)
    return ops


def _apply_ops(ops, X):
    X = np.array(X, float)
    for j, thr, factor in ops:
        above = X[:, j] > thr
        X[above, j] = thr + factor * (X[above, j] - thr)
    return X


def compressive_segments(ops, d, d_p):
    """One unit-length first-order segment per squeeze or stretch (memory untouched)."""
    out = []
    for j, thr, factor in ops:
        W = np.zeros((d, d))
        W[j, 0] = math.log(factor)
        A = np.zeros((d, d))
        A[0, j] = 1.0
        b1 = np.zeros(d)
        b1[0] = -thr
        out.append((1.0, MemoryControl(W, A, np.zeros((d, d_p)), b1, np.zeros(d),
                                       np.zeros(d_p), np.zeros(d), 0.0)))
    return out


def _cell_corners(lows, highs, inset):
    lows = np.asarray(lows, float)
    highs = np.asarray(highs, float)
    w = highs - lows
    lo, hi = lows + inset * w, highs - inset * w
    d = lows.shape[1]
    masks = np.array(np.meshgrid(*[[0, 1]] * d, indexing="ij")).reshape(d, -1).T
    return np.stack([np.where(m, hi, lo) for m in masks], axis=1)   # (cells, 2^d, d)


def universal_tracking(cell_lows, cell_highs, times, curves, d_p=None, tolerance=0.05,
                       n_intervals=8, warmup=1.0, inset=0.01, shrink=1e-2,
                       deviation_tol=None, max_refinements=6, n_steps_per_unit_time=400,
                       seed=0) -> UniversalTrackingResult:
    """Compress every cell toward its centre, then track one curve per cell.

    ``curves[c]`` is the curve assigned to cell ``c`` (typically the map at
    the cell centre).  The squeeze factor is divided by 10 until the corners
    of every compressed cell stay within ``deviation_tol`` of their centre's
    trajectory over ``[0, T]``.
    """
    lows = np.atleast_2d(np.asarray(cell_lows, float))
    highs = np.atleast_2d(np.asarray(cell_highs, float))
    n, d = lows.shape
    dp = 2 * d if d_p is None else int(d_p)
    edges = _tensor_edges(lows, highs)
    centres = 0.5 * (lows + highs)
    corners = _cell_corners(lows, highs, inset)
    dev_tol = tolerance / 4 if deviation_tol is None else deviation_tol
    dev = math.inf
    for _ in range(max_refinements + 1):
        ops = _compression_ops(edges, shrink, inset)
        reps = _apply_ops(ops, centres)
        targets = build_surrogate(times, curves, reps, n_intervals, tolerance / 2, warmup)
        track = plan_tracking(targets, dp, seed).schedule
        squeezed = _apply_ops(ops, corners.reshape(-1, d))
        spec = memory_spec(d, dp, track.t0, track.T)
        tt, X, _ = run_schedule(spec, track, np.vstack([reps, squeezed]), record=True,
                                n_steps_per_unit_time=n_steps_per_unit_time)
        keep = tt >= 0
        ref = X[keep][:, :n]
        moved = X[keep][:, n:].reshape(keep.sum(), n, -1, d)
        dev = float(np.max(np.linalg.norm(moved - ref[:, :, None], axis=-1)))
        if dev <= dev_tol:
            span = float(len(ops))
            b = ScheduleBuilder(Architecture.MEMORY, d, dp, track.t0 - span)
            for dur, ctrl in compressive_segments(ops, d, dp):
                b.add(dur, ctrl)
            for seg in track.segments:
                b.add(seg.duration, seg.params)
            return UniversalTrackingResult(b.build(), reps, targets, shrink, inset, span, dev)
        shrink *= 0.1
    raise MemorySynthesisError(f"compressed cells still deviate by {dev:.3g} "
                               f"after {max_refinements} refinements")


def universal_tracking_error(result, samples, sample_curves, volume=1.0,
                             n_steps_per_unit_time=400):
    """``sup_t`` of the L2 distance (Monte-Carlo over ``samples``) to the sampled map."""
    sched = result.schedule
    d = sched.d
    samples = np.atleast_2d(np.asarray(samples, float)).reshape(-1, d)
    Y = np.asarray(sample_curves, float).reshape(len(samples), -1, d)
    grid = result.targets[0].times
    spec = memory_spec(d, sched.d_p, sched.t0, sched.T)
    tt, X, _ = run_schedule(spec, sched, samples, record=True,
                            n_steps_per_unit_time=n_steps_per_unit_time)
    path = np.array([[np.interp(grid, tt, X[:, i, c]) for c in range(d)]
                     for i in range(len(samples))]).transpose(0, 2, 1)
    sq = np.sum((path - Y) ** 2, axis=-1)
    return float(np.sqrt(volume * sq.mean(axis=0)).max())
