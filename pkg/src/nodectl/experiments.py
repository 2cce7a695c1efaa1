"""Two training experiments and the decision-boundary topology probe.

* Disk classification: first-order NODE vs momentum ResNet trained on the
  indicator of a centred disk in [-1, 1]^2, read out linearly and thresholded
  at 0.5.
* Curve fitting: a scalar memory NODE trained to follow ``sin(c * x * t)``
  from a handful of starting points, judged on held-out starting points.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from enum import Enum

import numpy as np
from skimage import measure

from .dynamics import Activation, Architecture
from .training import (TrainableParams, TrainConfig, forward, history_csv, train)

DISK_RADIUS = 0.7


class Topology(str, Enum):
    CLOSED_IN_INTERIOR = "ClosedInInterior"
    TOUCHES_BORDER = "TouchesBorder"
    DEGENERATE = "Degenerate"


class CurveKind(str, Enum):
    SIN_XT = "sin"
    SIN_QUARTER_XT = "sin025"
    ZERO = "zero"
    HOLD = "hold"   # each curve stays at its source: the zero-motion target

    def __call__(self, sources, times):
        xt = np.outer(np.asarray(sources, float), np.asarray(times, float))
        if self is CurveKind.SIN_XT:
            return np.sin(xt)
        if self is CurveKind.SIN_QUARTER_XT:
            return np.sin(0.25 * xt)
        if self is CurveKind.HOLD:
            return np.tile(np.asarray(sources, float)[:, None], (1, xt.shape[1]))
        return np.zeros_like(xt)


@dataclass
class DiskDataset:
    samples: np.ndarray
    labels: np.ndarray
    radius: float = DISK_RADIUS
    seed: int = 0

    @classmethod
    def generate(cls, n=100, radius=DISK_RADIUS, seed=0):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1.0, 1.0, (n, 2))
        return cls(x, disk_indicator(x, radius), radius, seed)


def disk_indicator(points, radius=DISK_RADIUS):
    points = np.asarray(points, float)
    return (np.sum(points ** 2, axis=-1) < radius ** 2).astype(float)


@dataclass
class TrackingDataset:
    sources: np.ndarray
    times: np.ndarray       # nodes with t >= 0
    curves: np.ndarray      # (n_sources, n_times)
    kind: CurveKind = CurveKind.SIN_QUARTER_XT

    @classmethod
    def generate(cls, n, times, kind=CurveKind.SIN_QUARTER_XT, seed=0):
        sources = np.sort(np.random.default_rng(seed).uniform(0.0, 1.0, n))
        return cls.at(sources, times, kind)

    @classmethod
    def at(cls, sources, times, kind=CurveKind.SIN_QUARTER_XT):
        kind = CurveKind(kind)
        sources = np.asarray(sources, float)
        if np.any(sources <= 0) or np.any(sources >= 1):
            raise ValueError("sources must lie in (0, 1)")
        times = np.asarray(times, float)
        return cls(sources, times, kind(sources, times), kind)


def layer_grid(T, n_layers, n_warmup=0):
    """Uniform layer nodes on ``[-tau, T]`` with ``n_warmup`` layers before 0."""
    if not 0 <= n_warmup < n_layers:
        raise ValueError("need 0 <= n_warmup < n_layers")
    h = T / (n_layers - n_warmup)
    return h * np.arange(-n_warmup, n_layers - n_warmup + 1)


# -- metrics -------------------------------------------------------------------

def grid_points(resolution=200):
    """Cell centres of a ``resolution x resolution`` grid on [-1, 1]^2 (row = y)."""
    g = -1.0 + (np.arange(resolution) + 0.5) * (2.0 / resolution)
    gx, gy = np.meshgrid(g, g)
    return np.column_stack([gx.ravel(), gy.ravel()])


def readout_field(params: TrainableParams, resolution=200, activation=Activation.SIGMOID):
    """Linear readout of the time-T state over the grid, shape (resolution, resolution)."""
    pts = grid_points(resolution)
    xT = forward(params, pts, activation).x[-1]
    return (xT @ params["P"] + params["offset"]).reshape(resolution, resolution)


def l1_generalization_error(predict, truth=disk_indicator, resolution=200):
    """Normalized L1 distance on [-1, 1]^2 (total measure 1) between a {0,1} classifier
    and the truth, estimated on cell centres.

    ``predict`` maps an (n, 2) array to values thresholded at 0.5.
    """
    pts = grid_points(resolution)
    pred = (np.asarray(predict(pts), float) > 0.5).astype(float)
    return float(np.mean(np.abs(pred - truth(pts))))


def boundary_topology_probe(grid) -> Topology:
    """Classify a binary prediction grid by what its border ring carries."""
    g = np.asarray(grid).astype(bool)
    if g.all() or not g.any():
        return Topology.DEGENERATE
    ring = np.concatenate([g[0], g[-1], g[1:-1, 0], g[1:-1, -1]])
    if ring.all() or not ring.any():
        return Topology.CLOSED_IN_INTERIOR
    return Topology.TOUCHES_BORDER


def decision_boundary(values, level=0.5):
    """Level-set polylines of a grid field, in [-1, 1]^2 coordinates (x, y columns)."""
    values = np.asarray(values, float)
    n = values.shape[0]
    out = []
    for c in measure.find_contours(values, level):
        xy = -1.0 + (c[:, ::-1] + 0.5) * (2.0 / n)
        out.append(xy)
    return out


# -- disk experiment -------------------------------------------------------------

@dataclass
class DiskConfig:
    n_samples: int = 100
    radius: float = DISK_RADIUS
    n_layers: int = 25
    T: float = 10.0
    beta: float = 1e-6
    learning_rate: float = 0.5
    momentum: float = 0.9
    clip: float | None = 1.0
    iterations: int = 8000
    seed: int = 0
    data_seed: int = 0
    resolution: int = 200
    zero_init: bool = False


@dataclass
class DiskReport:
    architecture: Architecture
    seed: int
    error: float
    topology: Topology
    history: list
    boundary: list
    params: TrainableParams

    def to_dict(self):
        return {"architecture": self.architecture.value, "seed": self.seed,
                "error": self.error, "topology": self.topology.value,
                "final_loss": self.history[-1], "iterations": len(self.history) - 1,
                "n_boundary_curves": len(self.boundary), "params": self.params.to_dict()}

    def sidecars(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["curve", "x", "y"])
        for k, line in enumerate(self.boundary):
            for x, y in line:
                wr.writerow([k, repr(float(x)), repr(float(y))])
        return {"history.csv": history_csv(self.history), "boundary.csv": buf.getvalue()}


def run_disk_experiment(architecture, config: DiskConfig = DiskConfig()) -> DiskReport:
    arch = Architecture(architecture)
    if arch is Architecture.MEMORY:
        raise ValueError("the disk experiment compares first-order and momentum models")
    data = DiskDataset.generate(config.n_samples, config.radius, config.data_seed)
    times = np.linspace(0.0, config.T, config.n_layers + 1)
    d_p = 2 if arch is Architecture.MOMENTUM else 0
    if config.zero_init:
        p0 = TrainableParams.zeros(arch, 2, d_p, times, readout=True)
    else:
        p0 = TrainableParams.random(arch, 2, d_p, times, readout=True, seed=config.seed)
    params, history = train(p0, data.samples, data.labels,
                            TrainConfig(beta=config.beta, learning_rate=config.learning_rate,
                                        iterations=config.iterations, momentum=config.momentum,
                                        seed=config.seed, clip=config.clip))
    field_ = readout_field(params, config.resolution)
    truth = disk_indicator(grid_points(config.resolution), config.radius)
    pred = (field_.ravel() > 0.5).astype(float)
    error = float(np.mean(np.abs(pred - truth)))
    return DiskReport(arch, config.seed, error, boundary_topology_probe(field_ > 0.5),
                      [float(v) for v in history], decision_boundary(field_), params)


def best_of_seeds(run, seeds, key=lambda r: r.error):
    """Run ``run(seed)`` for each seed; return ``(best, all reports)``."""
    reports = [run(s) for s in seeds]
    return min(reports, key=key), reports


# -- curve-fitting experiment -----------------------------------------------------

@dataclass
class TrackingConfig:
    kind: CurveKind = CurveKind.SIN_QUARTER_XT
    n_sources: int = 5
    n_layers: int = 50
    n_warmup: int = 5
    T: float = 10.0
    d_p: int = 2
    beta: float = 1e-6
    learning_rate: float = 0.01
    momentum: float = 0.9
    clip: float | None = 1.0
    iterations: int = 6000
    activation: Activation = Activation.RELU
    seed: int = 0
    n_heldout: int = 50
    zero_init: bool = False

    def __post_init__(self):
        self.kind = CurveKind(self.kind)
        self.activation = Activation(self.activation)


@dataclass
class TrackingReport:
    seed: int
    training_error: float
    generalization_error: float
    generalization_max: float
    history: list
    times: np.ndarray
    sources: np.ndarray
    trajectories: np.ndarray     # (n_sources, n_times) on t >= 0
    params: TrainableParams

    def to_dict(self):
        return {"seed": self.seed, "training_error": self.training_error,
                "generalization_error": self.generalization_error,
                "generalization_max": self.generalization_max,
                "final_loss": self.history[-1], "iterations": len(self.history) - 1,
                "sources": self.sources.tolist(), "params": self.params.to_dict()}

    def sidecars(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t"] + [f"x_{i + 1}" for i in range(len(self.sources))])
        for k, t in enumerate(self.times):
            wr.writerow([repr(float(t))] + [repr(float(v)) for v in self.trajectories[:, k]])
        return {"history.csv": history_csv(self.history), "trajectories.csv": buf.getvalue()}


def sup_errors(params, dataset: TrackingDataset, activation=Activation.RELU):
    """Per-source sup over the nodes on [0, T] of |x_i(t) - y_i(t)|, and the trajectories."""
    fw = forward(params, dataset.sources[:, None], activation)
    traj = fw.x[params.times >= 0, :, 0].T
    return np.max(np.abs(traj - dataset.curves), axis=1), traj


def run_tracking_experiment(config: TrackingConfig = TrackingConfig()) -> TrackingReport:
    times = layer_grid(config.T, config.n_layers, config.n_warmup)
    nodes = times[times >= 0]
    data = TrackingDataset.generate(config.n_sources, nodes, config.kind, config.seed)
    held = TrackingDataset.at((np.arange(config.n_heldout) + 0.5) / config.n_heldout, nodes,
                              config.kind)
    if config.zero_init:
        p0 = TrainableParams.zeros(Architecture.MEMORY, 1, config.d_p, times)
    else:
        p0 = TrainableParams.random(Architecture.MEMORY, 1, config.d_p, times, seed=config.seed)
    params, history = train(p0, data.sources[:, None], data.curves,
                            TrainConfig(beta=config.beta, learning_rate=config.learning_rate,
                                        iterations=config.iterations, momentum=config.momentum,
                                        seed=config.seed, activation=config.activation,
                                        kind="tracking", clip=config.clip))
    train_err, traj = sup_errors(params, data, config.activation)
    held_err, _ = sup_errors(params, held, config.activation)
    return TrackingReport(config.seed, float(train_err.max()), float(held_err.mean()),
                          float(held_err.max()), [float(v) for v in history], nodes,
                          data.sources, traj, params)
