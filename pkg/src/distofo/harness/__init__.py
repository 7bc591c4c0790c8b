"""Run configs, Monte Carlo experiments, exports and the CLI."""

from .config import Arm, RunConfig, build_fixture, resolve_constraint
from .experiment import (
    Comparison,
    ExperimentResult,
    bound_inputs,
    bound_report,
    compare_bounds,
    export,
    resolve_problem,
    run_experiment,
    run_replica,
    solve_optimum,
    write_experiment,
)

__all__ = [
    "Arm", "RunConfig", "build_fixture", "resolve_constraint", "Comparison",
    "ExperimentResult", "bound_inputs", "bound_report", "compare_bounds", "export",
    "resolve_problem", "run_experiment", "run_replica", "solve_optimum", "write_experiment",
]
