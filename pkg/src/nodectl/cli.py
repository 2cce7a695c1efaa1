"""``nodectl``: synthesis, simulation, training experiments and verification from the shell.

Exit codes: 0 success, 1 domain error (infeasible problem, tolerance unmet,
divergence), 2 usage error (bad flags, unreadable or malformed input).
Set ``NODECTL_LOG`` to a logging level name for progress messages.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass

import numpy as np

from . import experiments as ex
from .dynamics import (Activation, Architecture, ControlSchedule, IntegrationError, ModelSpec,
                       PhasePoint, ScheduleError, ShapeError, run_schedule, integrate_euler,
                       integrate_reference)
from .memory_control import (MemoryControlProblem, MemorySynthesisError, SurrogateError,
                             build_surrogate, memory_control_trace, plan_tracking,
                             tracking_error)
from .momentum_control import (ControlProblem, HorizonTooShort, SynthesisError,
                               approximate_function, synthesize)
from .training import TrainingError

log = logging.getLogger("nodectl")


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


DOMAIN_ERRORS = (DomainError, SynthesisError, MemorySynthesisError, SurrogateError,
                 HorizonTooShort, TrainingError, IntegrationError)


# -- canonical JSON ----------------------------------------------------------------

def _encode(obj):
    if isinstance(obj, dict):
        items = sorted((str(k), v) for k, v in obj.items())
        return "{" + ", ".join(json.dumps(k) + ": " + _encode(v) for k, v in items) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError("non-finite number in JSON output")
        return format(v, ".17g")
    if hasattr(obj, "value"):
        return json.dumps(obj.value)
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def canonical_json(obj) -> str:
    """Sorted keys, floats with 17 significant digits (exact round trip)."""
    return _encode(obj) + "\n"


def write_atomic(path, text):
    path = os.path.abspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path), prefix=".nodectl-")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as e:
        raise UsageError(f"cannot read {path}: {e.strerror}")
    except json.JSONDecodeError as e:
        raise UsageError(f"{path} is not valid JSON: {e}")


def _parse_vector(text, name):
    try:
        v = np.asarray(json.loads(text), float)
    except (json.JSONDecodeError, TypeError, ValueError):
        raise UsageError(f"{name} must be a JSON list of numbers")
    return v


def _check_output(path):
    if path is None:
        return
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise UsageError(f"output directory {parent} does not exist")


def _emit(path, text):
    if path is None:
        sys.stdout.write(text)
    else:
        write_atomic(path, text)
        log.info("wrote %s", path)


def _sidecar_path(out, name):
    stem = out[:-5] if out.endswith(".json") else out
    return f"{stem}.{name}"


def _load_schedule(path):
    try:
        return ControlSchedule.from_dict(_read_json(path))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, UsageError):
            raise
        raise UsageError(f"{path} is not a valid schedule: {e}")


def _spec_for(schedule, activation):
    return ModelSpec(schedule.architecture, schedule.d, schedule.d_p,
                     activation=Activation(activation), t0=schedule.t0, T=schedule.T)


# -- subcommands -------------------------------------------------------------------

def cmd_simulate(args):
    sched = _load_schedule(args.schedule)
    x0 = _parse_vector(args.x0, "--x0").reshape(-1)
    p0 = (np.zeros(sched.d_p) if args.p0 is None
          else _parse_vector(args.p0, "--p0").reshape(-1))
    if x0.size != sched.d or p0.size != sched.d_p:
        raise UsageError(f"schedule expects x0 of length {sched.d} and p0 of length {sched.d_p}")
    _check_output(args.out)
    spec = _spec_for(sched, args.activation)
    integ = integrate_euler if args.method == "euler" else integrate_reference
    traj = integ(spec, sched, PhasePoint(x0, p0), n_steps_per_unit_time=args.steps_per_unit)
    _emit(args.out, traj.to_csv())
    return 0


def cmd_momentum_control(args):
    dct = _read_json(args.input)
    _check_output(args.out)
    _check_output(args.trace)
    try:
        problem = ControlProblem(dct["points"], dct["targets"], float(args.T))
    except KeyError as e:
        raise UsageError(f"{args.input} lacks field {e}")
    except ValueError as e:
        raise DomainError(str(e))
    if "d" in dct and int(dct["d"]) != problem.d:
        raise UsageError("field d does not match the points")
    trace = synthesize(problem, seed=args.seed)
    _emit(args.out, canonical_json(trace.schedule.to_dict()))
    if args.trace:
        write_atomic(args.trace, canonical_json(trace.to_dict()))
    return 0


def cmd_memory_control(args):
    dct = _read_json(args.input)
    _check_output(args.out)
    _check_output(args.trace)
    try:
        problem = MemoryControlProblem.from_dict(dct)
    except KeyError as e:
        raise UsageError(f"{args.input} lacks field {e}")
    except ValueError as e:
        raise DomainError(str(e))
    trace = memory_control_trace(problem, seed=args.seed)
    _emit(args.out, canonical_json(trace.schedule.to_dict()))
    if args.trace:
        write_atomic(args.trace, canonical_json(
            {"phases": [p.to_dict() for p in trace.phases],
             "predicted_x": trace.predicted_x, "predicted_p": trace.predicted_p}))
    return 0


def _load_curves(path):
    dct = _read_json(path)
    try:
        d = int(dct["d"])
        grid = np.asarray(dct["grid"], float)
        sources = np.array([np.asarray(c["x0"], float).reshape(d) for c in dct["curves"]])
        Y = np.array([np.asarray(c["y"], float).reshape(len(grid), d) for c in dct["curves"]])
    except KeyError as e:
        raise UsageError(f"{path} lacks field {e}")
    except (TypeError, ValueError) as e:
        raise UsageError(f"{path} has inconsistent shapes: {e}")
    if "T" in dct and not math.isclose(float(dct["T"]), grid[-1]):
        raise UsageError("field T must equal the last grid time")
    return d, grid, sources, Y


def cmd_track(args):
    d, grid, sources, Y = _load_curves(args.curves)
    _check_output(args.out)
    if not 0 < args.eps:
        raise UsageError("--eps must be positive")
    try:
        targets = build_surrogate(grid, Y, sources, n_intervals=args.intervals,
                                  tolerance=args.eps / 2, warmup=args.warmup)
    except SurrogateError:
        raise
    except ValueError as e:
        raise UsageError(str(e))
    sched = plan_tracking(targets, args.dp, seed=args.seed).schedule
    err = tracking_error(sched, targets, n_steps_per_unit_time=args.steps_per_unit)
    log.info("sup tracking error %.3g (requested %.3g)", err.max(), args.eps)
    _emit(args.out, canonical_json(sched.to_dict()))
    if err.max() > args.eps:
        raise DomainError(f"tracking error {err.max():.3g} exceeds {args.eps:.3g}")
    return 0


def cmd_approximate(args):
    dct = _read_json(args.input)
    _check_output(args.out)
    try:
        lows, highs, values = dct["lows"], dct["highs"], dct["values"]
    except KeyError as e:
        raise UsageError(f"{args.input} lacks field {e}")
    res = approximate_function(lows, highs, values, T_total=args.T, tolerance=args.tolerance)
    print(f"T_min {res.T_min:.6g}  predicted error {res.predicted_error:.3g}")
    _emit(args.out, canonical_json(res.schedule.to_dict()))
    return 0


def cmd_experiment(args):
    _check_output(args.out)
    if args.which == "disk":
        cfg = ex.DiskConfig(seed=args.seed)
        if args.iterations is not None:
            cfg.iterations = args.iterations
        report = ex.run_disk_experiment(args.arch, cfg)
        summary = f"L1 error {report.error:.4f}  boundary {report.topology.value}"
    else:
        cfg = ex.TrackingConfig(kind=args.m, seed=args.seed)
        if args.iterations is not None:
            cfg.iterations = args.iterations
        report = ex.run_tracking_experiment(cfg)
        summary = (f"training error {report.training_error:.4f}  "
                   f"held-out error {report.generalization_error:.4f}")
    print(summary)
    if args.out:
        write_atomic(args.out, canonical_json(report.to_dict()))
        for name, text in report.sidecars().items():
            write_atomic(_sidecar_path(args.out, name), text)
    return 0


@dataclass
class VerificationReport:
    errors: np.ndarray
    tolerance: float
    kind: str

    @property
    def max_error(self):
        return float(np.max(self.errors))

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def to_dict(self):
        return {"kind": self.kind, "errors": self.errors, "max_error": self.max_error,
                "tolerance": self.tolerance, "passed": self.passed}


def verify(schedule: ControlSchedule, problem: dict, tolerance=1e-3,
           n_steps_per_unit_time=2000, activation=Activation.RELU) -> VerificationReport:
    """Integrate ``schedule`` with the RK4 reference and compare against ``problem``.

    ``problem`` is a points file (endpoint targets), a memory problem (targets
    for states and memories) or a curves file (sup-t deviation on its grid).
    """
    arch = schedule.architecture
    spec = _spec_for(schedule, activation)
    if "curves" in problem:
        if arch is not Architecture.MEMORY:
            raise UsageError("curve tracking needs a memory schedule")
        d = int(problem["d"])
        grid = np.asarray(problem["grid"], float)
        X0 = np.array([np.asarray(c["x0"], float).reshape(d) for c in problem["curves"]])
        Y = np.array([np.asarray(c["y"], float).reshape(len(grid), d) for c in problem["curves"]])
        if d != schedule.d:
            raise UsageError("curve dimension does not match the schedule")
        if schedule.t0 > grid[0] or schedule.T < grid[-1]:
            raise UsageError("schedule does not cover the curve grid")
        times, X, _ = run_schedule(spec, schedule, X0, record=True,
                                   n_steps_per_unit_time=n_steps_per_unit_time)
        path = np.array([np.stack([np.interp(grid, times, X[:, i, c]) for c in range(d)],
                                  axis=-1) for i in range(len(X0))])
        errs = np.max(np.linalg.norm(path - Y, axis=-1), axis=1)
        return VerificationReport(errs, tolerance, "tracking")
    if "target_memories" in problem:
        if arch is not Architecture.MEMORY:
            raise UsageError("memory problem needs a memory schedule")
        prob = MemoryControlProblem.from_dict(problem)
        if (prob.d, prob.d_p) != (schedule.d, schedule.d_p):
            raise UsageError("problem dimensions do not match the schedule")
        X, P = run_schedule(spec, schedule, prob.initial_x, prob.initial_p,
                            n_steps_per_unit_time=n_steps_per_unit_time)
        errs = np.max(np.abs(np.hstack([X - prob.target_x, P - prob.target_p])), axis=1)
        return VerificationReport(errs, tolerance, "memory")
    if arch is Architecture.MEMORY:
        raise UsageError("points problem needs a momentum or first-order schedule")
    X0 = np.atleast_2d(np.asarray(problem["points"], float))
    Y = np.atleast_2d(np.asarray(problem["targets"], float))
    if X0.shape[1] != schedule.d or Y.shape != X0.shape:
        raise UsageError("problem dimensions do not match the schedule")
    X, _ = run_schedule(spec, schedule, X0, n_steps_per_unit_time=n_steps_per_unit_time)
    errs = np.max(np.abs(X - Y), axis=1)
    return VerificationReport(errs, tolerance, "endpoint")


def cmd_verify(args):
    sched = _load_schedule(args.schedule)
    problem = _read_json(args.problem)
    _check_output(args.out)
    try:
        rep = verify(sched, problem, args.tolerance, args.steps_per_unit, args.activation)
    except KeyError as e:
        raise UsageError(f"{args.problem} lacks field {e}")
    print(f"max error {rep.max_error:.6g} ({'pass' if rep.passed else 'fail'} at "
          f"{rep.tolerance:g})")
    if args.out:
        write_atomic(args.out, canonical_json(rep.to_dict()))
    if not rep.passed:
        raise DomainError(f"max error {rep.max_error:.3g} exceeds {rep.tolerance:g}")
    return 0


# -- argument parsing --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _positive(kind):
    def conv(text):
        v = kind(text)
        if not v > 0:
            raise argparse.ArgumentTypeError(f"{text} is not positive")
        return v
    return conv


def build_parser():
    p = _Parser(prog="nodectl", description=__doc__.splitlines()[0])
    p.add_argument("--json-errors", action="store_true",
                   help="also print errors as one JSON object on stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = sub.add_parser("simulate", help="integrate a schedule from one initial state")
    sp.add_argument("--schedule", required=True)
    sp.add_argument("--x0", required=True, help='JSON list, e.g. "[1,0]"')
    sp.add_argument("--p0", help="initial auxiliary state (default zero)")
    sp.add_argument("--method", choices=["rk4", "euler"], default="rk4")
    sp.add_argument("--steps-per-unit", type=_positive(float), default=1000.0)
    sp.add_argument("--activation", choices=[a.value for a in Activation], default="relu")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_simulate)

    sp = common(sub.add_parser("momentum-control", help="steer points to targets (momentum)"))
    sp.add_argument("--input", required=True, help="points.json")
    sp.add_argument("--T", type=_positive(float), default=10.0)
    sp.add_argument("--out")
    sp.add_argument("--trace")
    sp.set_defaults(func=cmd_momentum_control)

    sp = common(sub.add_parser("memory-control", help="steer states and memories to targets"))
    sp.add_argument("--input", required=True)
    sp.add_argument("--out")
    sp.add_argument("--trace")
    sp.set_defaults(func=cmd_memory_control)

    sp = common(sub.add_parser("track", help="follow sampled curves with a memory model"))
    sp.add_argument("--curves", required=True)
    sp.add_argument("--dp", type=_positive(int), default=None)
    sp.add_argument("--eps", type=_positive(float), default=0.05)
    sp.add_argument("--intervals", type=_positive(int), default=8)
    sp.add_argument("--warmup", type=_positive(float), default=1.0)
    sp.add_argument("--steps-per-unit", type=_positive(int), default=400)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_track)

    sp = common(sub.add_parser("approximate", help="flow map approximating a piecewise constant map"))
    sp.add_argument("--input", required=True, help='{"lows", "highs", "values"} per cell')
    sp.add_argument("--T", type=_positive(float), default=None)
    sp.add_argument("--tolerance", type=_positive(float), default=None)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_approximate)

    sp = sub.add_parser("experiment", help="training experiments")
    esub = sp.add_subparsers(dest="which", required=True, parser_class=_Parser)
    e = common(esub.add_parser("disk"))
    e.add_argument("--arch", choices=["momentum", "first_order"], default="momentum")
    e.add_argument("--iterations", type=_positive(int))
    e.add_argument("--out")
    e.set_defaults(func=cmd_experiment)
    e = common(esub.add_parser("tracking"))
    e.add_argument("--m", choices=[k.value for k in ex.CurveKind], default="sin025")
    e.add_argument("--iterations", type=_positive(int))
    e.add_argument("--out")
    e.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("verify", help="check a schedule against a problem")
    sp.add_argument("--schedule", required=True)
    sp.add_argument("--problem", required=True)
    sp.add_argument("--tolerance", type=_positive(float), default=1e-3)
    sp.add_argument("--steps-per-unit", type=_positive(int), default=2000)
    sp.add_argument("--activation", choices=[a.value for a in Activation], default="relu")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_verify)
    return p


def _report(exc, code, as_json):
    msg = str(exc) or type(exc).__name__
    print(f"nodectl: error: {msg}", file=sys.stderr)
    if as_json:
        print(json.dumps({"error": type(exc).__name__, "message": msg, "exit_code": code},
                         sort_keys=True), file=sys.stderr)
    return code


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    level = os.environ.get("NODECTL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(name)s: %(message)s")
    as_json = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        return _report(e, 2, as_json)
    except (ScheduleError, ShapeError) as e:
        return _report(e, 2, as_json)
    except DOMAIN_ERRORS as e:
        return _report(e, 1, as_json)
    except ValueError as e:
        return _report(e, 1, as_json)


if __name__ == "__main__":
    sys.exit(main())
