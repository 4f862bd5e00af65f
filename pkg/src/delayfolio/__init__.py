"""Portfolio optimisation under delayed factor models."""

from .closed_form import (
    CONVENTIONS,
    LqParams,
    PointwiseSolution,
    RiccatiSolution,
    eta_lq,
    feynman_kac_eta,
    optimal_pi_infinite,
    pointwise_pi,
    pointwise_solution,
    solve_riccati,
)
from .config import RunConfig, load_config, parse_config
from .delay_sde import (
    FactorPaths,
    TimeGrid,
    WealthPaths,
    constant_strategy,
    markov_strategy,
    simulate_factors,
    simulate_wealth,
)
from .errors import (
    BlowUpError,
    ConfigError,
    ConstraintError,
    DelayfolioError,
    IncompleteMarketError,
    NumericalError,
)
from .fbsde_solver import BsdeGridSolution, lsmc_solve, value_at_zero
from .market_model import (
    CoefficientSet,
    DelaySpec,
    ModelDims,
    PowerUtility,
    build_coefficients,
    market_terms,
    register_family,
)
from .martingale_method import check_theorem41, estimate_M_and_psi, simulate_H0
from .regression import BasisSpec
from .verify import TestReport, martingale_test, supermartingale_test, utility_dominance_test

__version__ = "0.1.0"
