"""P1 finite elements for topological derivatives of quasi-linear transmission problems."""

__version__ = "0.1.0"

from .asymptotics import fd_quotient, keps_convergence, projection_diagnostic, rate_state_difference
from .config import RunConfig, load_config, parse_config
from .corrector import CorrectorConfig, CorrectorResult, polarization_matrix, solve_K, solve_Q, solve_Qtilde
from .errors import ConfigurationError, MeshError, ParseError, PreconditionError, QuasiTDError, SolverError
from .fem import CostWeights, FeField, eval_cost, newton_solve, solve_adjoint
from .materials import FluxFunction, TwoPhaseMaterial, check_assumptions, linear, p_laplace, preset, reluctivity
from .mesh import InclusionShape, Mesh, Placement, generate_disk_mesh, generate_holdall_mesh, validate_mesh
from .problem import BENCHMARK_Z, Problem, benchmark_problem
from .topoderiv import TdBreakdown, td_field, td_from_gradients, td_point

__all__ = [
    "BENCHMARK_Z", "ConfigurationError", "CorrectorConfig", "CorrectorResult", "CostWeights", "FeField",
    "FluxFunction", "InclusionShape", "Mesh", "MeshError", "ParseError", "Placement", "PreconditionError",
    "Problem", "QuasiTDError", "RunConfig", "SolverError", "TdBreakdown", "TwoPhaseMaterial", "benchmark_problem",
    "check_assumptions", "eval_cost", "fd_quotient", "generate_disk_mesh", "generate_holdall_mesh",
    "keps_convergence", "linear", "load_config", "newton_solve", "p_laplace", "parse_config",
    "polarization_matrix", "preset", "projection_diagnostic", "rate_state_difference", "reluctivity",
    "solve_K", "solve_Q", "solve_Qtilde", "solve_adjoint", "td_field", "td_from_gradients", "td_point",
    "validate_mesh",
]
