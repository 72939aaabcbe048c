"""Proxy-variable production function estimation toolkit.

Simulates firm panels from a CES production/demand system with heterogeneous
demand (under which the observables-to-productivity inversion genuinely
fails), estimates the structural parameters with the two-step procedure under
plain and orthogonalized moment conditions, tests the hypothesized parameters
with firm-clustered Lagrange-multiplier statistics, tests invertibility
itself, and reports how sensitive the estimates are to first-step prediction
error.
"""

__version__ = "0.1.0"

from .model import (
    ModelParams,
    FirmState,
    production_f,
    production_dv,
    production_dtheta,
    law_g,
    law_g_prime,
    law_g_dprime,
    law_g_dtheta,
    persistence_at_zero,
    log_markup_plus_disturbance,
)
from .basis import BasisSpec, build_design, hermite_univariate, n_basis_columns
from .dgp import (
    DgpConfig,
    MomentTargets,
    DemandParams,
    PriceParams,
    CalibratedLaw,
    FirmPanel,
    calibrate_law,
    solve_variable_input,
    capital_next,
    simulate_panel,
    baseline_config,
    modified_config,
)
from .firststep import Step1Fit, make_observables, fit_ols, fit_mlp, predict, predict_lagged
from .gmm import (
    MomentSpec,
    GmmResult,
    moment_original,
    moment_modified,
    moment_dtheta,
    weighting_matrix,
    instrument_matrix,
    estimate,
)
from .inference import LmResult, clustered_omega_blocks, lm_test_plugin, lm_test_standard
from .invertibility import InvertTestResult, clustered_covariance, test_mean_independence
from .sensitivity import SensitivityResult, diagnostic
from .config import ExperimentConfig, load_config
from .harness import SummaryTable, run_experiment, summarize, markup_truth, average_log_markup

__all__ = [name for name in dir() if not name.startswith("_")]
