"""Distributed OPF reference schedules, neighbor probing, anomaly detection and isolation."""
from .detection import DetectorParams, DetectorState, decay_factor, factor_series, rate_term, reset, update_factor
from .dopf import DOPFSolver, ReferenceSchedule, fixed_reference, solve_dopf
from .grid import (
    CaseError,
    DecoupledNetwork,
    Network,
    Prosumer,
    TieLine,
    TopologyError,
    decouple,
    isolate,
    load_case,
    neighbors,
    parse_case,
    two_hop,
)
from .kernels import BACKEND
from .mitigation import (
    PenaltyParams,
    aggregate_penalty,
    apply_mitigation,
    check_threshold,
    neighbor_penalty,
    utility_decide,
)
from .probing import MessageBus, collect_window, dead_zone, energy_mismatch
from .sim import Scenario, SimTrace, load_scenario, parse_scenario, run, write_trace

__version__ = "0.1.0"
