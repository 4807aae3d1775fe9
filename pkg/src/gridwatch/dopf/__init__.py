"""Distributed optimal power flow on the auxiliary-bus decoupled network."""
from .coordination import (
    ConsensusResidual,
    ConsensusStep,
    LineSearchStall,
    MeritFunction,
    SingularSystemError,
    SolverWorkspace,
    build_derivatives,
    consensus_residual,
    consensus_step,
    line_search,
)
from .local import (
    LocalInfeasibleError,
    LocalSolveError,
    LocalState,
    Region,
    build_region,
    flat_state,
    local_solve,
)
from .schedule import ReferenceSchedule, ScheduleError, fixed_reference
from .solver import DOPFNotConverged, DOPFResult, DOPFSolver, IterationRecord, network_losses, solve_dopf
