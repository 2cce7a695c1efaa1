# %% [markdown]
# Following curves for all time with a memory model
#
# Hitting targets at the final time is one thing; staying close to a prescribed
# curve at every instant is another. A memory model does it by storing each
# point's current slope in its auxiliary state. Curves are first replaced by
# piecewise linear surrogates on a shared partition, then the memory is rewritten
# at each break while the states keep moving.

# %%
import numpy as np

from nodectl import build_surrogate, plan_tracking, tracking_error
from nodectl.dynamics import run_schedule
from nodectl.memory_control import memory_spec

times = np.linspace(0, 1, 401)
sources = np.array([[0.15], [0.5], [0.85]])
curves = np.array([
    np.sin(3 * times),
    0.5 * np.cos(5 * times) + 0.2 * np.sin(11 * times),
    1 - 2 * times ** 2,
])[..., None]

# %%
for eps in (0.2, 0.1, 0.05, 0.02):
    targets = build_surrogate(times, curves, sources, n_intervals=2, tolerance=eps / 2)
    trace = plan_tracking(targets, 2)
    err = tracking_error(trace.schedule, targets, 2000)
    print(f"eps {eps:5.2f}: {targets[0].n_intervals:3d} intervals, "
          f"{len(trace.schedule.segments):4d} segments, sup error {err.max():.4f}")

# %% [markdown]
# During the warm-up interval before t = 0 the points are carried to the starting
# values of their curves. After that they move along straight pieces. A coarse
# printout of one run shows this.

# %%
targets = build_surrogate(times, curves, sources, n_intervals=8, tolerance=0.025)
sched = plan_tracking(targets, 2).schedule
spec = memory_spec(1, 2, sched.t0, sched.T)
tt, X, P = run_schedule(spec, sched, sources, record=True, n_steps_per_unit_time=2000)
for t in np.linspace(sched.t0, sched.T, 9):
    k = np.searchsorted(tt, t)
    k = min(k, len(tt) - 1)
    row = "  ".join(f"{v:+.3f}" for v in X[k, :, 0])
    print(f"t = {tt[k]:+.3f}  x = {row}")
