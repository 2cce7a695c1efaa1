"""Control synthesis, simulation and training for neural ODEs with momentum or memory."""

from .dynamics import (Activation, Architecture, ControlSchedule, ControlSegment, MemoryControl,
                       ModelSpec, PerceptronControl, PhasePoint, ScheduleBuilder,
                       eigen_regime, flow_endpoint, integrate_euler, integrate_reference,
                       propagate_damped, propagate_forced, reference_endpoints, run_schedule,
                       vector_field)
from .momentum_control import (ControlProblem, approximate_function, compressive_schedule,
                               synthesize)
from .memory_control import (MemoryControlProblem, build_surrogate, memory_simultaneous_control,
                             pairwise_simultaneous_control, plan_tracking, tracking_control,
                             tracking_error, universal_tracking)
from .training import (TrainableParams, TrainConfig, gradient, loss_endpoint, loss_tracking,
                       train)
from .experiments import (DiskConfig, DiskDataset, Topology, TrackingConfig, TrackingDataset,
                          boundary_topology_probe, l1_generalization_error, run_disk_experiment,
                          run_tracking_experiment)

__version__ = "0.1.0"
