"""Least-squares training of the Euler-discretized models.

One layer is one explicit Euler step with its own parameters.  Gradients are
exact reverse-mode derivatives of the discrete loss, written out by hand for
each architecture (the recursions are short and numpy does the batching).

Parameter norm: ``sum_k h_k * |layer_k|^2`` over layers (a discrete L2 norm in
time; equals the mean over layers times the horizon for a uniform grid) plus
the plain squared norm of the readout.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (Activation, Architecture, ControlSchedule, MemoryControl,
                       PerceptronControl, ScheduleBuilder)

_PERCEPTRON = (("w", "d"), ("a", "d"), ("b", None))
_MEMORY = (("w", "d"), ("a", "d"), ("c", "dp"), ("b1", None), ("b2", "d"), ("u", "dp"),
           ("dv", "d"), ("f", None))
LAYER_FIELDS = {Architecture.FIRST_ORDER: _PERCEPTRON, Architecture.MOMENTUM: _PERCEPTRON,
                Architecture.MEMORY: _MEMORY}


class TrainingError(RuntimeError):
    pass


class TrainingDiverged(TrainingError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass
class TrainableParams:
    """Per-layer values on the time grid ``times`` plus an optional linear readout."""

    architecture: Architecture
    d: int
    d_p: int
    times: np.ndarray
    values: dict
    readout: bool = False

    def __post_init__(self):
        self.architecture = Architecture(self.architecture)
        self.times = np.asarray(self.times, float)
        if self.n_layers < 1 or np.any(np.diff(self.times) <= 0):
            raise ValueError("need at least one layer on an increasing time grid")
        vals = {}
        for name, shape in self._shapes().items():
            if name not in self.values:
                raise ValueError(f"missing parameter {name!r}")
            arr = np.asarray(self.values[name], float)
            try:
                arr = arr.reshape(shape)
            except ValueError:
                raise ValueError(f"parameter {name!r} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"parameter {name!r} is not finite")
            vals[name] = arr
        self.values = vals

    @property
    def n_layers(self):
        return len(self.times) - 1

    @property
    def steps(self):
        return np.diff(self.times)

    def _shapes(self):
        dims = {"d": (self.d,), "dp": (self.d_p,), None: ()}
        out = {name: (self.n_layers,) + dims[kind]
               for name, kind in LAYER_FIELDS[self.architecture]}
        if self.readout:
            out["P"] = (self.d,)
            out["offset"] = ()
        return out

    def __getitem__(self, name):
        return self.values[name]

    @classmethod
    def zeros(cls, architecture, d, d_p, times, readout=False):
        proto = cls.__new__(cls)
        proto.architecture, proto.d, proto.d_p = Architecture(architecture), d, d_p
        proto.times, proto.readout = np.asarray(times, float), readout
        return cls(architecture, d, d_p, times,
                   {k: np.zeros(s) for k, s in proto._shapes().items()}, readout)

    @classmethod
    def random(cls, architecture, d, d_p, times, readout=False, seed=0, scale=0.5):
        z = cls.zeros(architecture, d, d_p, times, readout)
        rng = np.random.default_rng(seed)
        for k in z.values:
            z.values[k] = rng.uniform(-scale, scale, z.values[k].shape)
        return z

    def to_vector(self):
        return np.concatenate([v.ravel() for v in self.values.values()])

    def with_vector(self, vec):
        vec = np.asarray(vec, float)
        out, pos = {}, 0
        for k, v in self.values.items():
            out[k] = vec[pos:pos + v.size].reshape(v.shape)
            pos += v.size
        if pos != vec.size:
            raise ValueError("vector length does not match parameters")
        return TrainableParams(self.architecture, self.d, self.d_p, self.times, out,
                               self.readout)

    def like(self, values):
        return TrainableParams(self.architecture, self.d, self.d_p, self.times, values,
                               self.readout)

    def sq_norm(self):
        h = self.steps
        total = 0.0
        for name, _ in LAYER_FIELDS[self.architecture]:
            v = self.values[name].reshape(self.n_layers, -1)
            total += float(np.sum(h * np.sum(v * v, axis=1)))
        if self.readout:
            total += float(np.sum(self.values["P"] ** 2) + self.values["offset"] ** 2)
        return total

    def sq_norm_grad(self):
        h = self.steps
        g = {}
        for name, _ in LAYER_FIELDS[self.architecture]:
            v = self.values[name]
            g[name] = 2.0 * v * h.reshape((-1,) + (1,) * (v.ndim - 1))
        if self.readout:
            g["P"] = 2.0 * self.values["P"]
            g["offset"] = 2.0 * self.values["offset"]
        return g

    def to_dict(self):
        return {"architecture": self.architecture.value, "d": self.d, "d_p": self.d_p,
                "times": self.times.tolist(), "readout": self.readout,
                "values": {k: np.asarray(v).tolist() for k, v in self.values.items()}}

    @classmethod
    def from_dict(cls, dct):
        return cls(dct["architecture"], int(dct["d"]), int(dct["d_p"]), dct["times"],
                   dct["values"], bool(dct.get("readout", False)))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_schedule(self) -> ControlSchedule:
        """One constant segment per layer."""
        b = ScheduleBuilder(self.architecture, self.d, self.d_p, self.times[0])
        v = self.values
        for k, h in enumerate(self.steps):
            if self.architecture is Architecture.MEMORY:
                d, dp = self.d, self.d_p
                W = np.zeros((d, d))
                W[:, 0] = v["w"][k]
                A = np.zeros((d, d))
                A[0] = v["a"][k]
                C = np.zeros((d, dp))
                C[0] = v["c"][k]
                b1 = np.zeros(d)
                b1[0] = v["b1"][k]
                b.add(h, MemoryControl(W, A, C, b1, v["b2"][k], v["u"][k], v["dv"][k],
                                       v["f"][k]))
            else:
                b.add(h, PerceptronControl(v["w"][k], v["a"][k], v["b"][k]))
        return b.build()

    @classmethod
    def from_schedule(cls, schedule: ControlSchedule, readout=False):
        """Inverse of ``to_schedule`` for schedules that use one hidden unit and fixed offsets."""
        times = [schedule.t0] + [s.t_end for s in schedule.segments]
        rows = {}
        for s in schedule.segments:
            c = s.params
            if isinstance(c, MemoryControl):
                if c.f_rate or c.f_decay:
                    raise ValueError("moving offsets have no layer equivalent")
                if np.any(c.W[:, 1:]) or np.any(c.A[1:]) or np.any(c.C[1:]) or np.any(c.b1[1:]):
                    raise ValueError("only the first hidden unit can be represented")
                row = {"w": c.W[:, 0], "a": c.A[0], "c": c.C[0], "b1": c.b1[0], "b2": c.b2,
                       "u": c.u, "dv": c.d_vec, "f": c.f}
            else:
                if c.b_rate or c.b_decay:
                    raise ValueError("moving offsets have no layer equivalent")
                row = {"w": c.w, "a": c.a, "b": c.b}
            for k, val in row.items():
                rows.setdefault(k, []).append(val)
        vals = {k: np.array(v) for k, v in rows.items()}
        out = cls.zeros(schedule.architecture, schedule.d, schedule.d_p, times, readout)
        out.values.update(vals)
        return out.like(out.values)


def _act(kind, z):
    if kind is Activation.RELU:
        return np.maximum(z, 0.0), (z > 0).astype(float)
    s = 0.5 * (1.0 + np.tanh(0.5 * z))
    return s, s * (1.0 - s)


@dataclass
class Forward:
    x: np.ndarray          # (n_layers + 1, n, d)
    p: np.ndarray          # (n_layers + 1, n, d_p)
    pre: list              # per-layer pre-activations


def forward(params: TrainableParams, X0, activation=Activation.SIGMOID, P0=None) -> Forward:
    """Unrolled Euler states at every layer node."""
    act = Activation(activation)
    arch = params.architecture
    X0 = np.atleast_2d(np.asarray(X0, float))
    n = X0.shape[0]
    dp = params.d_p if arch is not Architecture.FIRST_ORDER else 0
    x = X0.copy()
    p = np.zeros((n, dp)) if P0 is None else np.asarray(P0, float).reshape(n, dp).copy()
    xs, ps, pres = [x.copy()], [p.copy()], []
    v = params.values
    with np.errstate(over="ignore", invalid="ignore"):
        _forward_layers(params, act, x, p, xs, ps, pres)
    return Forward(np.array(xs), np.array(ps), pres)


def _forward_layers(params, act, x, p, xs, ps, pres):
    arch = params.architecture
    v = params.values
    for k, h in enumerate(params.steps):
        if arch is Architecture.MEMORY:
            z1 = x @ v["a"][k] + p @ v["c"][k] + v["b1"][k]
            z2 = x @ v["dv"][k] + v["f"][k]
            s1, _ = _act(act, z1)
            s2, _ = _act(act, z2)
            x, p = (x + h * (np.outer(s1, v["w"][k]) + v["b2"][k]),
                    p + h * np.outer(s2, v["u"][k]))
            pres.append((z1, z2))
        else:
            z = x @ v["a"][k] + v["b"][k]
            s, _ = _act(act, z)
            if arch is Architecture.MOMENTUM:
                x, p = x + h * p, p + h * (-p + np.outer(s, v["w"][k]))
            else:
                x = x + h * np.outer(s, v["w"][k])
            pres.append(z)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(p))):
            raise TrainingError(f"non-finite state after layer {k}")
        xs.append(x.copy())
        ps.append(p.copy())


def _backward(params, fw, lam_x_nodes, activation):
    """Reverse sweep; ``lam_x_nodes[k]`` is the direct loss sensitivity to ``x`` at node k."""
    act = Activation(activation)
    arch = params.architecture
    v = params.values
    L = params.n_layers
    grads = {k: np.zeros_like(val) for k, val in v.items()}
    lx = lam_x_nodes[L].copy()
    lp = np.zeros_like(fw.p[L])
    for k in range(L - 1, -1, -1):
        h = params.steps[k]
        x, p = fw.x[k], fw.p[k]
        if arch is Architecture.MEMORY:
            z1, z2 = fw.pre[k]
            s1, ds1 = _act(act, z1)
            s2, ds2 = _act(act, z2)
            r1 = h * (lx @ v["w"][k]) * ds1
            r2 = h * (lp @ v["u"][k]) * ds2
            grads["w"][k] = h * (s1 @ lx)
            grads["b2"][k] = h * lx.sum(axis=0)
            grads["a"][k] = r1 @ x
            grads["c"][k] = r1 @ p
            grads["b1"][k] = r1.sum()
            grads["u"][k] = h * (s2 @ lp)
            grads["dv"][k] = r2 @ x
            grads["f"][k] = r2.sum()
            lx, lp = (lx + np.outer(r1, v["a"][k]) + np.outer(r2, v["dv"][k]),
                      lp + np.outer(r1, v["c"][k]))
        else:
            z = fw.pre[k]
            s, ds = _act(act, z)
            force = lp if arch is Architecture.MOMENTUM else lx
            r = h * (force @ v["w"][k]) * ds
            grads["w"][k] = h * (s @ force)
            grads["a"][k] = r @ x
            grads["b"][k] = r.sum()
            if arch is Architecture.MOMENTUM:
                lx, lp = lx + np.outer(r, v["a"][k]), h * lx + (1.0 - h) * lp
            else:
                lx = lx + np.outer(r, v["a"][k])
        if not (np.all(np.isfinite(lx)) and np.all(np.isfinite(lp))):
            raise TrainingError(f"non-finite adjoint at layer {k}")
        lx = lx + lam_x_nodes[k]
    return grads


def _predict(params, xT):
    return xT @ params.values["P"] + params.values["offset"]


def _endpoint_parts(params, X, Y, activation):
    X = np.atleast_2d(np.asarray(X, float))
    fw = forward(params, X, activation)
    xT = fw.x[-1]
    Y = np.asarray(Y, float)
    if params.readout:
        res = _predict(params, xT) - Y.reshape(-1)
        fit = float(np.mean(res ** 2))
    else:
        res = xT - Y.reshape(xT.shape)
        fit = float(np.mean(np.sum(res ** 2, axis=1)))
    return fw, res, fit


def loss_endpoint(params: TrainableParams, X, Y, beta=0.0, activation=Activation.SIGMOID):
    """``mean |readout(x_i(T)) - y_i|^2 + beta * |params|^2``."""
    if len(np.atleast_2d(X)) == 0:
        raise ValueError("empty dataset")
    _, _, fit = _endpoint_parts(params, X, Y, activation)
    return fit + beta * params.sq_norm()


def trapezoid_weights(times):
    t = np.asarray(times, float)
    w = np.zeros_like(t)
    if len(t) > 1:
        dt = np.diff(t)
        w[:-1] += 0.5 * dt
        w[1:] += 0.5 * dt
    return w


def _tracking_parts(params, X, curves, activation):
    X = np.atleast_2d(np.asarray(X, float))
    fw = forward(params, X, activation)
    mask = params.times >= 0.0
    Y = np.asarray(curves, float)
    n = X.shape[0]
    Y = Y.reshape(n, mask.sum(), -1)
    if Y.shape[2] != params.d:
        raise ValueError("curves have the wrong state dimension")
    wts = trapezoid_weights(params.times[mask])
    res = fw.x[mask] - Y.transpose(1, 0, 2)           # (nodes >= 0, n, d)
    fit = float(np.sum(wts[:, None] * np.sum(res ** 2, axis=2)) / n)
    return fw, mask, wts, res, fit


def loss_tracking(params: TrainableParams, X, curves, beta=0.0, activation=Activation.SIGMOID):
    """``mean_i integral_0^T |x_i(t) - y_i(t)|^2 dt + beta * |params|^2`` (trapezoid on nodes).

    ``curves[i]`` holds ``y_i`` at the layer nodes with ``t >= 0``; the warm-up
    nodes before 0 are not part of the integral.
    """
    mask = params.times >= 0.0
    if np.asarray(curves).reshape(len(np.atleast_2d(X)), -1).shape[1] != mask.sum() * params.d:
        raise ValueError("curve grid does not match the layer nodes on [0, T]")
    _, _, _, _, fit = _tracking_parts(params, X, curves, activation)
    return fit + beta * params.sq_norm()


def gradient(params: TrainableParams, X, Y, beta=0.0, kind="endpoint",
             activation=Activation.SIGMOID):
    """``(loss, gradient dict)`` by reverse-mode differentiation of the Euler recursion."""
    n = len(np.atleast_2d(X))
    lam = np.zeros((params.n_layers + 1, n, params.d))
    if kind == "endpoint":
        fw, res, fit = _endpoint_parts(params, X, Y, activation)
        extra = {}
        if params.readout:
            lam[-1] = (2.0 / n) * np.outer(res, params.values["P"])
            extra = {"P": (2.0 / n) * (res @ fw.x[-1]), "offset": (2.0 / n) * res.sum()}
        else:
            lam[-1] = (2.0 / n) * res
    elif kind == "tracking":
        fw, mask, wts, res, fit = _tracking_parts(params, X, Y, activation)
        lam[mask] = (2.0 / n) * wts[:, None, None] * res
        extra = {}
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    with np.errstate(over="ignore", invalid="ignore"):
        grads = _backward(params, fw, lam, activation)
    grads.update(extra)
    reg = params.sq_norm_grad()
    for k in grads:
        grads[k] = grads[k] + beta * reg[k]
    return fit + beta * params.sq_norm(), grads


def flatten_grad(params, grads):
    return np.concatenate([np.asarray(grads[k]).ravel() for k in params.values])


@dataclass
class TrainConfig:
    beta: float = 1e-6
    learning_rate: float = 0.05
    iterations: int = 1000
    momentum: float = 0.0
    seed: int = 0
    activation: Activation = Activation.SIGMOID
    kind: str = "endpoint"
    clip: float | None = None

    def __post_init__(self):
        self.activation = Activation(self.activation)
        if not (math.isfinite(self.beta) and self.beta >= 0):
            raise ValueError("beta must be finite and non-negative")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")


DIVERGENCE = 1e12


def train(params0: TrainableParams, X, Y, config: TrainConfig):
    """Gradient descent (optionally heavy-ball); returns ``(params, loss history)``.

    The history records the loss at every iterate before its update, plus the
    final one.  ``clip`` caps the gradient norm when set.
    """
    vec = params0.to_vector()
    vel = np.zeros_like(vec)
    history = []
    params = params0
    for _ in range(config.iterations):
        loss, g = gradient(params, X, Y, config.beta, config.kind, config.activation)
        history.append(loss)
        if not math.isfinite(loss) or loss > DIVERGENCE:
            raise TrainingDiverged(f"loss {loss:.3g} after {len(history)} iterations", history)
        g = flatten_grad(params, g)
        if config.clip is not None:
            norm = np.linalg.norm(g)
            if norm > config.clip:
                g = g * (config.clip / norm)
        vel = config.momentum * vel - config.learning_rate * g
        vec = vec + vel
        params = params.with_vector(vec)
    loss, _ = gradient(params, X, Y, config.beta, config.kind, config.activation)
    history.append(loss)
    return params, history


def history_csv(history):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["iter", "loss"])
    for k, v in enumerate(history):
        wr.writerow([k, repr(float(v))])
    return buf.getvalue()
