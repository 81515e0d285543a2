"""Cooperative arbitrage of two storage units under quadratic price impact.

A strategy charges and discharges two capacity- and rate-limited units
against a known price path, where trading moves the price linearly. The
solver builds the jointly optimal strategy stage by stage, exposing the
multiplier structure behind each commitment, a certifier that checks
optimality from scratch, and grid dynamic-programming oracles for ground
truth on small instances.
"""

from .core import (
    CostDomainError,
    CostModel,
    InfeasibleProblemError,
    InvalidInstanceError,
    OracleBudgetError,
    OracleGapError,
    ProblemInstance,
    StorageUnit,
    Strategy,
    ToleranceSet,
    ValidationReport,
    default_tolerances,
    increments_from_levels,
    levels_from_increments,
    total_cost,
    validate_instance,
)
from .duo import (
    DuoHorizons,
    MultiplierPath,
    SolveResult,
    inner_solve_unit2,
    near_separable_compare,
    order_units,
    reduce_equal_ratio,
    solve_two,
)
from .scalar import tie_segment, xhat_pair, xhat_single
from .stage import (
    Boundary,
    HorizonReport,
    Mode,
    SingleSolveResult,
    StageResult,
    boundary_multiplier,
    run_stage,
    solve_single,
)
from .verify import (
    CertificateReport,
    GapReport,
    OracleResult,
    certify,
    certify_single,
    compare,
    oracle_dp,
    oracle_dp_single,
    write_counterexample,
)

__version__ = "0.1.0"

__all__ = [
    "CostDomainError",
    "CostModel",
    "InfeasibleProblemError",
    "InvalidInstanceError",
    "OracleBudgetError",
    "OracleGapError",
    "ProblemInstance",
    "StorageUnit",
    "Strategy",
    "ToleranceSet",
    "ValidationReport",
    "default_tolerances",
    "increments_from_levels",
    "levels_from_increments",
    "total_cost",
    "validate_instance",
    "xhat_single",
    "xhat_pair",
    "tie_segment",
    "Mode",
    "Boundary",
    "StageResult",
    "HorizonReport",
    "SingleSolveResult",
    "boundary_multiplier",
    "run_stage",
    "solve_single",
    "order_units",
    "inner_solve_unit2",
    "solve_two",
    "reduce_equal_ratio",
    "near_separable_compare",
    "MultiplierPath",
    "DuoHorizons",
    "SolveResult",
    "CertificateReport",
    "certify",
    "certify_single",
    "OracleResult",
    "oracle_dp",
    "oracle_dp_single",
    "GapReport",
    "compare",
    "write_counterexample",
]
