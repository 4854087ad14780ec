"""Hybrid microscopic/macroscopic traffic simulation on dynamic clusters."""

from .control import ControlPolicy, Controller, SwitchCommand, apply_commands, detect_congestion, evaluate_policy, track_front
from .coupling import (
    GenerationSchedule,
    SensorReading,
    aggregate_micro_to_macro,
    calibrate_idm,
    disaggregate_macro_to_micro,
    record_sensor,
    schedule_generation,
)
from .engine import RunOutput, World, run
from .macro import MetanetParams, equilibrium_speed, step_density, step_macro_cluster, step_speed
from .micro import IdmParams, MobilParams, equilibrium_gap, idm_acceleration, mobil_decision, step_micro_cluster
from .network import (
    ClusterPartition,
    build_network,
    derive_sensor_graph,
    merge_clusters,
    minimal_cut,
    shift_boundary,
    split_cluster,
)
from .outputs import emit_outputs
from .scenario import Scenario, dump_scenario, load_scenario

__version__ = "0.1.0"
