import json
import os
import subprocess
import sys

import numpy as np
import pytest

from nodectl.cli import canonical_json, main, verify
from nodectl.dynamics import (Architecture, ControlSchedule, PerceptronControl,
                              ScheduleBuilder, propagate_damped)


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def points_file(tmp_path):
    return write(tmp_path / "points.json", {"d": 2, "points": [[0.5, 0.1], [-0.3, 0.4]],
                                             "targets": [[0.2, -0.2], [0.6, 0.3]]})


@pytest.fixture
def synthesized(tmp_path, points_file):
    out = tmp_path / "s.json"
    assert main(["momentum-control", "--input", points_file, "--out", str(out)]) == 0
    return str(out)


def test_simulate_writes_trajectory_csv(tmp_path, synthesized):
    out = tmp_path / "traj.csv"
    assert main(["simulate", "--schedule", synthesized, "--x0", "[1,0]", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t,x_1,x_2,p_1,p_2"
    assert float(lines[1].split(",")[1]) == 1.0


def test_verify_passes_on_own_problem(synthesized, points_file, capsys):
    assert main(["verify", "--schedule", synthesized, "--problem", points_file]) == 0
    assert "max error" in capsys.readouterr().out


def test_zero_schedule_fails_with_free_deviation(tmp_path):
    b = ScheduleBuilder(Architecture.MOMENTUM, 1, 1)
    b.wait(10.0)
    sched = b.build()
    problem = {"points": [[0.3]], "targets": [[1.0]]}
    rep = verify(sched, problem)
    assert not rep.passed
    # p starts at 0, so the free dynamics keep x fixed
    free, _ = propagate_damped(0.3, 0.0, 10.0)
    assert rep.max_error == pytest.approx(abs(free - 1.0), abs=1e-9)
    spath = tmp_path / "zero.json"
    spath.write_text(canonical_json(sched.to_dict()))
    assert main(["verify", "--schedule", str(spath),
                 "--problem", write(tmp_path / "p.json", problem)]) == 1


def test_tampered_schedule_fails(tmp_path, synthesized, points_file):
    dct = json.loads(open(synthesized).read())
    sched = ControlSchedule.from_dict(dct)
    busiest = max(range(len(sched.segments)),
                  key=lambda k: np.abs(sched.segments[k].params.w).max())
    seg = sched.segments[busiest]
    segs = list(sched.segments)
    segs[busiest] = type(seg)(seg.t_start, seg.duration, PerceptronControl.zeros(2))
    bad = ControlSchedule(sched.architecture, 2, 2, segs)
    path = tmp_path / "bad.json"
    path.write_text(canonical_json(bad.to_dict()))
    assert main(["verify", "--schedule", str(path), "--problem", points_file]) == 1


def test_schedule_json_round_trip_is_byte_identical(synthesized):
    text = open(synthesized).read()
    again = canonical_json(ControlSchedule.from_dict(json.loads(text)).to_dict())
    assert again == text
    assert canonical_json(json.loads(text)) == text


def test_canonical_json_floats_round_trip():
    vals = [0.1, 1 / 3, 1e-300, -2.5e17, 123456789.123456789]
    assert json.loads(canonical_json({"v": vals}))["v"] == vals
    with pytest.raises(ValueError):
        canonical_json([float("nan")])


def test_usage_errors_exit_two(tmp_path, capsys):
    assert main(["simulate", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert main(["verify", "--schedule", str(tmp_path / "missing.json"),
                 "--problem", "x"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["momentum-control", "--input", str(bad)]) == 2


def test_mismatched_dimensions_are_usage_errors(tmp_path, synthesized):
    assert main(["simulate", "--schedule", synthesized, "--x0", "[1,0,0]"]) == 2
    prob = write(tmp_path / "p.json", {"points": [[0.0]], "targets": [[1.0]]})
    assert main(["verify", "--schedule", synthesized, "--problem", prob]) == 2


def test_domain_error_exits_one_with_json(tmp_path, capsys):
    dup = write(tmp_path / "dup.json", {"points": [[0.1, 0.2], [0.1, 0.2]],
                                        "targets": [[0.0, 0.0], [1.0, 1.0]]})
    assert main(["--json-errors", "momentum-control", "--input", dup]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    payload = json.loads(err[-1])
    assert payload["exit_code"] == 1 and payload["message"]


def test_missing_output_directory_is_checked_before_work(tmp_path, points_file):
    out = tmp_path / "nowhere" / "s.json"
    assert main(["momentum-control", "--input", points_file, "--out", str(out)]) == 2
    assert not out.exists()


def test_outputs_leave_no_temporary_files(tmp_path, synthesized):
    assert sorted(os.listdir(tmp_path)) == ["points.json", "s.json"]


def test_memory_control_and_verify(tmp_path):
    prob = write(tmp_path / "m.json", {"points": [[0.1], [0.6]], "memories": [[0.0], [0.5]],
                                       "targets": [[1.0], [-1.0]],
                                       "target_memories": [[0.3], [0.2]], "d_p": 1})
    out = tmp_path / "ms.json"
    assert main(["memory-control", "--input", prob, "--out", str(out)]) == 0
    assert main(["verify", "--schedule", str(out), "--problem", prob]) == 0


def test_track_and_verify(tmp_path):
    grid = np.linspace(0, 1, 41)
    curves = {"d": 1, "grid": grid.tolist(),
              "curves": [{"x0": [0.2], "y": (0.2 + np.sin(2 * grid)).tolist()},
                         {"x0": [0.7], "y": (0.7 - grid).tolist()}]}
    cpath = write(tmp_path / "c.json", curves)
    out = tmp_path / "t.json"
    assert main(["track", "--curves", cpath, "--dp", "2", "--out", str(out)]) == 0
    assert main(["verify", "--schedule", str(out), "--problem", cpath,
                 "--tolerance", "0.05", "--steps-per-unit", "400"]) == 0


def test_approximate_refuses_short_horizon(tmp_path):
    cells = write(tmp_path / "cells.json", {"lows": [[0, 0], [0.5, 0]], "highs": [[0.5, 1], [1, 1]],
                                            "values": [[1.0, 0.5], [-0.5, 1.0]]})
    assert main(["approximate", "--input", cells, "--T", "0.01"]) == 1
    assert main(["approximate", "--input", cells, "--out", str(tmp_path / "a.json")]) == 0


def test_experiment_writes_report_and_sidecars(tmp_path):
    out = tmp_path / "report.json"
    args = ["experiment", "tracking", "--m", "sin025", "--seed", "0", "--iterations", "5",
            "--out", str(out)]
    assert main(args) == 0
    first = out.read_text()
    assert (tmp_path / "report.history.csv").read_text().startswith("iter,loss\n")
    assert (tmp_path / "report.trajectories.csv").exists()
    assert main(args) == 0
    assert out.read_text() == first
    disk = tmp_path / "disk.json"
    assert main(["experiment", "disk", "--arch", "first_order", "--iterations", "3",
                 "--out", str(disk)]) == 0
    assert (tmp_path / "disk.boundary.csv").read_text().startswith("curve,x,y")


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "nodectl.cli", "verify", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and "--tolerance" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "nodectl.cli", "frobnicate"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
