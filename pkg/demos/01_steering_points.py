# %% [markdown]
# Steering a handful of points with a momentum model
#
# A momentum model carries a velocity next to every state. With a single
# perceptron switched on and off in time, every starting point can be sent to its
# own target, even when two targets coincide. This script builds such a schedule,
# checks it with the fine-step RK4 integrator, and looks at how the schedule is
# organised.

# %%
import numpy as np

from nodectl import ControlProblem, ModelSpec, reference_endpoints, synthesize
from nodectl.dynamics import eigen_regime

rng = np.random.default_rng(0)
points = rng.uniform(-1, 1, (6, 2))
targets = rng.uniform(-1, 1, (6, 2))
targets[3] = targets[0]           # two points share a destination
problem = ControlProblem(points, targets, T=10.0)

# %%
trace = synthesize(problem)
sched = trace.schedule
print(f"{len(sched.segments)} segments on [0, {sched.T:g}], {trace.switch_count} switches")
for name in dict.fromkeys(r.name for r in trace.phase_log):
    recs = [r for r in trace.phase_log if r.name == name]
    print(f"  {name:20s} {len(recs):3d} segments, ends at t = {recs[-1].t_end:.3f}")

# %% [markdown]
# The synthesized schedule is checked with an integrator that knows nothing about
# how it was built.

# %%
spec = ModelSpec.momentum(2, T=sched.T)
reached, velocity = reference_endpoints(spec, sched, points, None, n_steps_per_unit_time=10_000)
errors = np.abs(reached - targets).max(axis=1)
print("endpoint error per point:", " ".join(f"{e:.1e}" for e in errors))
print("final speed per point:   ", np.linalg.norm(velocity, axis=1).round(3))

# %% [markdown]
# A constant scalar feedback ``w`` turns the linearised dynamics into
# ``x'' + x' + w x = 0``. The sign and size of ``w`` decide what a constant
# control does.

# %%
for w in (-1.0, 0.0, 0.2, 0.25, 3.0):
    rep = eigen_regime(w)
    eig = ", ".join(f"{z.real:+.3f}{z.imag:+.3f}j" for z in rep.eigenvalues)
    print(f"w = {w:5.2f}: {rep.classification.value:18s} eigenvalues {eig}")
