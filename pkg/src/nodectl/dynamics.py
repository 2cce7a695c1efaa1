"""State types, vector fields and integrators for the three continuous-depth models.

Three architectures share one schedule representation:

* first-order NODE   ``x' = w sigma(<a, x> + b)``
* momentum ResNet    ``eps x'' + x' = w sigma(<a, x> + b)`` (reduced to ``(x, p)``)
* memory NODE        ``x' = W sigma(A x + C p + b1) + b2``, ``p' = u sigma(<d, x> + f)``

Controls are piecewise constant in time.  The only exception is the scalar
offset ``b`` (perceptron models) or ``f`` (memory model) which may move as
``base + rate*s + decay*exp(-s)`` inside a segment; this is what lets a
hyperplane follow a point that evolves under the free dynamics.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from . import _kernels

MIN_DURATION = 1e-12
CONTIGUITY_TOL = 1e-9


class ScheduleError(ValueError):
    """Malformed or non-contiguous control schedule."""


class ShapeError(ValueError):
    """Control or state arrays that do not match the model dimensions."""


class IntegrationError(RuntimeError):
    """The integrated state became non-finite."""


class Architecture(str, Enum):
    FIRST_ORDER = "first_order"
    MOMENTUM = "momentum"
    MEMORY = "memory"


class Activation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"


def activation(kind, z):
    """ReLU or logistic sigmoid, elementwise on scalars or arrays."""
    kind = Activation(kind)
    z = np.asarray(z, dtype=float)
    if kind is Activation.RELU:
        out = np.maximum(z, 0.0)
    else:
        out = 0.5 * (1.0 + np.tanh(0.5 * z))
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class ModelSpec:
    architecture: Architecture
    d: int
    d_p: int = 0
    activation: Activation = Activation.RELU
    epsilon: float = 1.0
    t0: float = 0.0
    T: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.d < 1:
            raise ShapeError("d must be positive")
        if self.architecture is Architecture.FIRST_ORDER and self.d_p != 0:
            raise ShapeError("first-order NODE has no auxiliary state (d_p must be 0)")
        if self.architecture is Architecture.MOMENTUM and self.d_p != self.d:
            raise ShapeError("momentum model needs d_p == d")
        if self.architecture is Architecture.MEMORY and self.d_p < 0:
            raise ShapeError("d_p must be non-negative")
        if not self.T > self.t0:
            raise ScheduleError("horizon must satisfy T > t0")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @classmethod
    def momentum(cls, d, **kw):
        return cls(Architecture.MOMENTUM, d, d, **kw)

    @classmethod
    def first_order(cls, d, **kw):
        return cls(Architecture.FIRST_ORDER, d, 0, **kw)

    @classmethod
    def memory(cls, d, d_p, **kw):
        return cls(Architecture.MEMORY, d, d_p, **kw)


@dataclass(frozen=True, eq=False)
class PhasePoint:
    """State ``x`` together with velocity (momentum) or memory ``p``."""

    x: np.ndarray
    p: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        x = np.array(self.x, dtype=float).reshape(-1)
        p = np.array(self.p, dtype=float).reshape(-1)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
            raise ValueError("phase point entries must be finite")
        x.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "p", p)

    def __eq__(self, other):
        return (isinstance(other, PhasePoint) and np.array_equal(self.x, other.x)
                and np.array_equal(self.p, other.p))

    def as_vector(self):
        return np.concatenate([self.x, self.p])


def project_state(pt: PhasePoint) -> np.ndarray:
    """Drop the velocity/memory part."""
    return pt.x.copy()


def _frozen(arr, shape=None):
    a = np.array(arr, dtype=float)
    if shape is not None:
        a = a.reshape(shape)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PerceptronControl:
    """``w sigma(<a, x> + b(s))`` with ``b(s) = b + b_rate*s + b_decay*exp(-s)``."""

    w: np.ndarray
    a: np.ndarray
    b: float = 0.0
    b_rate: float = 0.0
    b_decay: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "w", _frozen(self.w).reshape(-1))
        object.__setattr__(self, "a", _frozen(self.a).reshape(-1))
        for name in ("b", "b_rate", "b_decay"):
            object.__setattr__(self, name, float(getattr(self, name)))
        vals = np.concatenate([self.w, self.a, [self.b, self.b_rate, self.b_decay]])
        if not np.all(np.isfinite(vals)):
            raise ValueError("control values must be finite")
        if self.w.shape != self.a.shape:
            raise ShapeError("w and a must have the same length")

    @classmethod
    def zeros(cls, d):
        return cls(np.zeros(d), np.zeros(d), 0.0)

    def offset(self, s):
        return self.b + self.b_rate * s + self.b_decay * np.exp(-s)

    def to_dict(self):
        return {"w": self.w.tolist(), "a": self.a.tolist(), "b": self.b,
                "b_rate": self.b_rate, "b_decay": self.b_decay}

    @classmethod
    def from_dict(cls, dct):
        return cls(dct["w"], dct["a"], dct.get("b", 0.0), dct.get("b_rate", 0.0),
                   dct.get("b_decay", 0.0))


@dataclass(frozen=True, eq=False)
class MemoryControl:
    """Controls of the memory NODE; ``f`` may move like ``PerceptronControl.b``."""

    W: np.ndarray
    A: np.ndarray
    C: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    u: np.ndarray
    d_vec: np.ndarray
    f: float = 0.0
    f_rate: float = 0.0
    f_decay: float = 0.0

    def __post_init__(self):
        W = np.atleast_2d(np.array(self.W, dtype=float))
        d = W.shape[0]
        u = np.array(self.u, dtype=float).reshape(-1)
        dp = u.shape[0]
        C = np.array(self.C, dtype=float).reshape(d, dp)
        object.__setattr__(self, "W", _frozen(W, (d, d)))
        object.__setattr__(self, "A", _frozen(self.A, (d, d)))
        object.__setattr__(self, "C", _frozen(C))
        object.__setattr__(self, "b1", _frozen(self.b1, (d,)))
        object.__setattr__(self, "b2", _frozen(self.b2, (d,)))
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "d_vec", _frozen(self.d_vec, (d,)))
        for name in ("f", "f_rate", "f_decay"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for arr in (self.W, self.A, self.C, self.b1, self.b2, self.u, self.d_vec):
            if not np.all(np.isfinite(arr)):
                raise ValueError("control values must be finite")
        if not all(math.isfinite(v) for v in (self.f, self.f_rate, self.f_decay)):
            raise ValueError("control values must be finite")

    @property
    def dims(self):
        return self.W.shape[0], self.u.shape[0]

    @classmethod
    def zeros(cls, d, d_p):
        z = np.zeros
        return cls(z((d, d)), z((d, d)), z((d, d_p)), z(d), z(d), z(d_p), z(d), 0.0)

    def with_(self, **changes):
        return replace(self, **changes)

    def offset(self, s):
        return self.f + self.f_rate * s + self.f_decay * np.exp(-s)

    def to_dict(self):
        return {"W": self.W.tolist(), "A": self.A.tolist(), "C": self.C.tolist(),
                "b1": self.b1.tolist(), "b2": self.b2.tolist(), "u": self.u.tolist(),
                "d": self.d_vec.tolist(), "f": self.f, "f_rate": self.f_rate,
                "f_decay": self.f_decay}

    @classmethod
    def from_dict(cls, dct):
        return cls(dct["W"], dct["A"], dct["C"], dct["b1"], dct["b2"], dct["u"],
                   dct["d"], dct.get("f", 0.0), dct.get("f_rate", 0.0),
                   dct.get("f_decay", 0.0))


@dataclass(frozen=True)
class ControlSegment:
    t_start: float
    duration: float
    params: PerceptronControl | MemoryControl

    def __post_init__(self):
        if not (math.isfinite(self.t_start) and math.isfinite(self.duration)):
            raise ScheduleError("segment times must be finite")
        if self.duration < MIN_DURATION:
            raise ScheduleError(f"segment duration {self.duration!r} below {MIN_DURATION}")

    @property
    def t_end(self):
        return self.t_start + self.duration


@dataclass(frozen=True)
class ControlSchedule:
    architecture: Architecture
    d: int
    d_p: int
    segments: tuple

    def __post_init__(self):
        object.__setattr__(self, "architecture", Architecture(self.architecture))
        object.__setattr__(self, "segments", tuple(self.segments))
        for k, seg in enumerate(self.segments):
            self._check_params(k, seg.params)
        for k in range(1, len(self.segments)):
            prev, cur = self.segments[k - 1], self.segments[k]
            if abs(cur.t_start - prev.t_end) > CONTIGUITY_TOL * max(1.0, abs(cur.t_start)):
                raise ScheduleError(
                    f"segments {k - 1} and {k} are not contiguous "
                    f"({prev.t_end!r} != {cur.t_start!r})")

    def _check_params(self, k, params):
        if self.architecture is Architecture.MEMORY:
            if not isinstance(params, MemoryControl):
                raise ShapeError(f"segment {k}: memory schedule needs MemoryControl")
            if params.dims != (self.d, self.d_p):
                raise ShapeError(f"segment {k}: control dims {params.dims} != {(self.d, self.d_p)}")
        else:
            if not isinstance(params, PerceptronControl):
                raise ShapeError(f"segment {k}: expected PerceptronControl")
            if params.w.shape[0] != self.d:
                raise ShapeError(f"segment {k}: control length {params.w.shape[0]} != d={self.d}")

    @property
    def t0(self):
        return self.segments[0].t_start

    @property
    def T(self):
        return self.segments[-1].t_end

    def __len__(self):
        return len(self.segments)

    def check_covers(self, t0, T):
        if not self.segments:
            raise ScheduleError("empty schedule")
        tol = CONTIGUITY_TOL * max(1.0, abs(t0), abs(T))
        if abs(self.t0 - t0) > tol or abs(self.T - T) > tol:
            raise ScheduleError(f"schedule spans [{self.t0}, {self.T}], expected [{t0}, {T}]")

    def then(self, other: "ControlSchedule") -> "ControlSchedule":
        return ControlSchedule(self.architecture, self.d, self.d_p,
                               self.segments + other.segments)

    def shifted(self, dt):
        segs = [ControlSegment(s.t_start + dt, s.duration, s.params) for s in self.segments]
        return ControlSchedule(self.architecture, self.d, self.d_p, segs)

    def to_dict(self):
        return {"architecture": self.architecture.value, "d": self.d, "d_p": self.d_p,
                "segments": [{"t_start": s.t_start, "duration": s.duration,
                              "params": s.params.to_dict()} for s in self.segments]}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    @classmethod
    def from_dict(cls, dct):
        arch = Architecture(dct["architecture"])
        pcls = MemoryControl if arch is Architecture.MEMORY else PerceptronControl
        segs = [ControlSegment(float(s["t_start"]), float(s["duration"]),
                               pcls.from_dict(s["params"])) for s in dct["segments"]]
        return cls(arch, int(dct["d"]), int(dct["d_p"]), segs)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


class ScheduleBuilder:
    """Append segments back to back starting from ``t0``."""

    def __init__(self, architecture, d, d_p, t0=0.0):
        self.architecture = Architecture(architecture)
        self.d = d
        self.d_p = d_p
        self.t = float(t0)
        self.segments = []

    def add(self, duration, params):
        seg = ControlSegment(self.t, float(duration), params)
        self.segments.append(seg)
        self.t = seg.t_end
        return seg

    def wait(self, duration):
        if self.architecture is Architecture.MEMORY:
            return self.add(duration, MemoryControl.zeros(self.d, self.d_p))
        return self.add(duration, PerceptronControl.zeros(self.d))

    def build(self):
        return ControlSchedule(self.architecture, self.d, self.d_p, self.segments)


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    x: np.ndarray  # (n_nodes, d)
    p: np.ndarray  # (n_nodes, d_p)
    schedule_ref: ControlSchedule | None = None

    @property
    def points(self):
        return [PhasePoint(x, p) for x, p in zip(self.x, self.p)]

    @property
    def endpoint(self):
        return PhasePoint(self.x[-1], self.p[-1])

    def to_csv(self):
        d, dp = self.x.shape[1], self.p.shape[1]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t"] + [f"x_{j + 1}" for j in range(d)] + [f"p_{j + 1}" for j in range(dp)])
        for t, x, p in zip(self.times, self.x, self.p):
            wr.writerow([repr(float(v)) for v in (t, *x, *p)])
        return buf.getvalue()


def vector_field(spec: ModelSpec, cv, pt: PhasePoint, s=0.0) -> PhasePoint:
    """Time derivative of ``pt`` under constant controls ``cv`` (``s``: time in segment)."""
    x, p = pt.x, pt.p
    if x.shape[0] != spec.d or p.shape[0] != spec.d_p:
        raise ShapeError(f"state dims ({x.shape[0]}, {p.shape[0]}) != ({spec.d}, {spec.d_p})")
    act = spec.activation
    if spec.architecture is Architecture.MEMORY:
        if not isinstance(cv, MemoryControl) or cv.dims != (spec.d, spec.d_p):
            raise ShapeError("memory model needs MemoryControl of matching dims")
        dx = cv.W @ activation(act, cv.A @ x + cv.C @ p + cv.b1) + cv.b2
        dp = cv.u * activation(act, cv.d_vec @ x + cv.offset(s))
        return PhasePoint(dx, dp)
    if not isinstance(cv, PerceptronControl) or cv.w.shape[0] != spec.d:
        raise ShapeError("perceptron model needs PerceptronControl of length d")
    force = cv.w * activation(act, cv.a @ x + cv.offset(s))
    if spec.architecture is Architecture.FIRST_ORDER:
        return PhasePoint(force, np.zeros(0))
    return PhasePoint(p, (-p + force) / spec.epsilon)


# -- integration -------------------------------------------------------------

def _steps_for(duration, n_per_unit):
    return max(1, int(math.ceil(duration * n_per_unit - 1e-9)))


def _pack(spec, schedule, n_per_unit):
    if schedule.architecture is not spec.architecture:
        raise ScheduleError("schedule architecture does not match model")
    if (schedule.d, schedule.d_p) != (spec.d, spec.d_p):
        raise ShapeError("schedule dims do not match model")
    segs = schedule.segments
    nsteps = np.array([_steps_for(s.duration, n_per_unit) for s in segs], dtype=np.int64)
    durs = np.array([s.duration for s in segs])
    if spec.architecture is Architecture.MEMORY:
        arrays = (
            np.array([s.params.W for s in segs]).reshape(len(segs), spec.d, spec.d),
            np.array([s.params.A for s in segs]).reshape(len(segs), spec.d, spec.d),
            np.array([s.params.C for s in segs]).reshape(len(segs), spec.d, spec.d_p),
            np.array([s.params.b1 for s in segs]).reshape(len(segs), spec.d),
            np.array([s.params.b2 for s in segs]).reshape(len(segs), spec.d),
            np.array([s.params.u for s in segs]).reshape(len(segs), spec.d_p),
            np.array([s.params.d_vec for s in segs]).reshape(len(segs), spec.d),
            np.array([[s.params.f, s.params.f_rate, s.params.f_decay] for s in segs]),
        )
    else:
        arrays = (
            np.array([s.params.w for s in segs]).reshape(len(segs), spec.d),
            np.array([s.params.a for s in segs]).reshape(len(segs), spec.d),
            np.array([[s.params.b, s.params.b_rate, s.params.b_decay] for s in segs]),
        )
    return nsteps, durs, arrays


def _as_batch(spec, X0, P0=None):
    X0 = np.atleast_2d(np.asarray(X0, dtype=float))
    n = X0.shape[0]
    if P0 is None:
        P0 = np.zeros((n, spec.d_p))
    P0 = np.asarray(P0, dtype=float).reshape(n, spec.d_p)
    if X0.shape[1] != spec.d:
        raise ShapeError(f"initial states have dimension {X0.shape[1]}, expected {spec.d}")
    return np.ascontiguousarray(np.hstack([X0, P0]))


def run_schedule(spec, schedule, X0, P0=None, *, method="rk4", n_steps_per_unit_time=100_000,
                 record=False):
    """Integrate a batch of initial states; the workhorse behind the public integrators.

    Returns ``(X, P)`` at the final time, or ``(times, X, P)`` with a leading
    node axis when ``record`` is set.
    """
    if not schedule.segments:
        raise ScheduleError("empty schedule")
    Z0 = _as_batch(spec, X0, P0)
    nsteps, durs, arrays = _pack(spec, schedule, n_steps_per_unit_time)
    meth = _kernels.RK4 if method == "rk4" else _kernels.EULER
    act = _kernels.RELU if spec.activation is Activation.RELU else _kernels.SIGMOID
    if spec.architecture is Architecture.MEMORY:
        Z, rec, bad = _kernels.run_memory(act, spec.d, spec.d_p, Z0, nsteps, durs, *arrays,
                                          meth, record)
    else:
        momentum = spec.architecture is Architecture.MOMENTUM
        Z, rec, bad = _kernels.run_perceptron(momentum, act, spec.epsilon, spec.d, Z0,
                                              nsteps, durs, *arrays, meth, record)
    if bad >= 0:
        raise IntegrationError(f"non-finite state at integration step {bad}")
    d = spec.d
    if not record:
        return Z[:, :d].copy(), Z[:, d:].copy()
    times = _node_times(schedule, nsteps)
    return times, rec[:, :, :d], rec[:, :, d:]


def _node_times(schedule, nsteps):
    parts = [np.array([schedule.t0])]
    for seg, n in zip(schedule.segments, nsteps):
        parts.append(seg.t_start + seg.duration * np.arange(1, n + 1) / n)
    return np.concatenate(parts)


def _single(spec, schedule, x0, method, n_per_unit):
    schedule.check_covers(spec.t0, spec.T)
    if not isinstance(x0, PhasePoint):
        x0 = PhasePoint(x0, np.zeros(spec.d_p))
    if x0.p.shape[0] != spec.d_p:
        raise ShapeError("initial auxiliary state has wrong length")
    times, X, P = run_schedule(spec, schedule, x0.x[None], x0.p[None], method=method,
                               n_steps_per_unit_time=n_per_unit, record=True)
    return Trajectory(times, X[:, 0], P[:, 0], schedule)


def integrate_euler(spec: ModelSpec, schedule: ControlSchedule, x0, n_steps_per_unit_time=1000):
    """Explicit Euler with the grid snapped to every segment boundary."""
    return _single(spec, schedule, x0, "euler", n_steps_per_unit_time)


def integrate_reference(spec: ModelSpec, schedule: ControlSchedule, x0,
                        n_steps_per_unit_time=100_000):
    """Classical RK4 on a grid 100x finer than the default Euler grid."""
    return _single(spec, schedule, x0, "rk4", n_steps_per_unit_time)


def flow_endpoint(spec, schedule, x0, n_steps_per_unit_time=1000) -> PhasePoint:
    return integrate_euler(spec, schedule, x0, n_steps_per_unit_time).endpoint


def reference_endpoints(spec, schedule, X0, P0=None, n_steps_per_unit_time=100_000):
    """Batch RK4 endpoints ``(X, P)`` without validating coverage of ``[t0, T]``."""
    return run_schedule(spec, schedule, X0, P0, n_steps_per_unit_time=n_steps_per_unit_time)


# -- closed forms for constant controls (eps = 1) -----------------------------

def propagate_damped(x0, p0, t):
    """Free momentum dynamics ``x'' + x' = 0``; conserves ``x + p``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be non-negative")
    decay = np.exp(-np.asarray(t, dtype=float))
    return x0 + (1.0 - decay) * p0, decay * p0


def propagate_forced(x0, p0, q, t):
    """``x'' + x' = q`` with constant ``q``."""
    if np.any(np.asarray(t) < 0):
        raise ValueError("t must be non-negative")
    t = np.asarray(t, dtype=float)
    decay = np.exp(-t)
    x = x0 + (1.0 - decay) * p0 + q * (t - 1.0 + decay)
    p = decay * p0 + q * (1.0 - decay)
    return x, p


class Regime(str, Enum):
    ATTRACTOR = "attractor"
    DAMPED_OSCILLATOR = "damped_oscillator"
    SADDLE = "saddle"
    DEGENERATE = "degenerate"          # w == 0: a line of equilibria
    CRITICAL = "critically_damped"     # w == 1/4: repeated eigenvalue


@dataclass(frozen=True)
class RegimeReport:
    eigenvalues: tuple
    classification: Regime


def eigen_regime(w: float) -> RegimeReport:
    """Eigenvalues of ``[[0, 1], [-w, -1]]``, i.e. the roots of ``l^2 + l + w``.

    The roots are ``-1/2 +- sqrt(1/4 - w)``.
    """
    w = float(w)
    disc = complex(0.25 - w) ** 0.5
    lam = (-0.5 + disc, -0.5 - disc)
    if w == 0.0:
        kind = Regime.DEGENERATE
    elif w == 0.25:
        kind = Regime.CRITICAL
    elif w < 0:
        kind = Regime.SADDLE
    elif w < 0.25:
        kind = Regime.ATTRACTOR
    else:
        kind = Regime.DAMPED_OSCILLATOR
    return RegimeReport(lam, kind)


def slow_eigenvalue(w):
    """Least negative eigenvalue for ``w`` in the attractor band ``(0, 1/4)``."""
    return -0.5 + math.sqrt(0.25 - w)
