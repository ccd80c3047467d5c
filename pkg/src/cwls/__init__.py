"""GNSS attitude determination by constrained wrapped least squares."""

from .errors import (
    BoxTooLarge,
    CollinearAxes,
    CwlsError,
    DegenerateGeometry,
    EmptyAfterFilter,
    EmptyCandidatePool,
    EpochFormatError,
    RankDeficientWarning,
    SingularGram,
)
from .objective import WeightedModel, ambiguity_from_rotation, cwls_objective, cycle_round, wrap
from .obs_model import (
    GPS_L1_WAVELENGTH,
    ArrayGeometry,
    Attitude,
    DdEpoch,
    DesignMatrix,
    LosSet,
    build_dd_covariance,
    build_design_matrix,
    euler_to_rotation,
    rotation_to_euler,
)
from .reference import OracleInput, afm_grid_search, brute_force_cils, oracle_solver
from .simulator import ScenarioConfig, gen_constellation, run_campaign, run_grid, synthesize_epoch
from .solver import (
    CandidateSet,
    SolveReport,
    SolverParams,
    angle_filter,
    assemble_coarse_rotation,
    refine_multi,
    refine_single,
    search_candidates_single,
    solve,
    solve_multi_baseline,
    solve_single_baseline,
    wahba_orthogonalize,
)

__version__ = "0.1.0"

__all__ = [
    "afm_grid_search",
    "ambiguity_from_rotation",
    "angle_filter",
    "ArrayGeometry",
    "assemble_coarse_rotation",
    "Attitude",
    "BoxTooLarge",
    "brute_force_cils",
    "build_dd_covariance",
    "build_design_matrix",
    "CandidateSet",
    "CollinearAxes",
    "cwls_objective",
    "CwlsError",
    "cycle_round",
    "DdEpoch",
    "DegenerateGeometry",
    "DesignMatrix",
    "EmptyAfterFilter",
    "EmptyCandidatePool",
    "EpochFormatError",
    "euler_to_rotation",
    "gen_constellation",
    "GPS_L1_WAVELENGTH",
    "LosSet",
    "oracle_solver",
    "OracleInput",
    "RankDeficientWarning",
    "refine_multi",
    "refine_single",
    "rotation_to_euler",
    "run_campaign",
    "run_grid",
    "ScenarioConfig",
    "search_candidates_single",
    "SingularGram",
    "solve",
    "solve_multi_baseline",
    "solve_single_baseline",
    "SolveReport",
    "SolverParams",
    "synthesize_epoch",
    "wahba_orthogonalize",
    "WeightedModel",
    "wrap",
]
