# %% [markdown]
# Learning a disk: first-order flow vs momentum model
#
# Both models are trained by gradient descent on 100 labelled points, with the
# label being membership of a centred disk. A first-order flow in the plane is a
# homeomorphism, so its linear readout can only cut the square along a curve that
# reaches the border. The momentum model moves in a four-dimensional phase space
# and can enclose the disk. Training takes a few seconds per run at the reduced
# budget used here; the acceptance suite uses the full budget.

# %%
import numpy as np

from nodectl import DiskConfig, run_disk_experiment
from nodectl.experiments import readout_field

ITERATIONS = 3000

reports = {}
for arch in ("first_order", "momentum"):
    rep = run_disk_experiment(arch, DiskConfig(iterations=ITERATIONS, seed=0))
    reports[arch] = rep
    print(f"{arch:12s} L1 error {rep.error:.4f}  boundary {rep.topology.value}  "
          f"final loss {rep.history[-1]:.4f}")

# %% [markdown]
# A 24 x 24 picture of each classifier: ``#`` marks predicted inside.

# %%
for arch, rep in reports.items():
    field = readout_field(rep.params, 24) > 0.5
    print(f"\n{arch}")
    for row in field[::-1]:
        print("".join("#" if v else "." for v in row))

# %% [markdown]
# The loss curves are part of each report; the CLI writes them as CSV sidecars.

# %%
for arch, rep in reports.items():
    h = np.array(rep.history)
    marks = [0, len(h) // 10, len(h) // 2, len(h) - 1]
    print(arch, " ".join(f"{i}:{h[i]:.4f}" for i in marks))
