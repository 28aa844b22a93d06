"""Rank volatility stabilized markets: simulation, calibration, portfolios.

The package is organized around five concerns:

* :mod:`rankvol.model` — parameter and state types, ranking, parameter checks.
* :mod:`rankvol.simulate` — Euler simulation and Monte-Carlo moments.
* :mod:`rankvol.panel` / :mod:`rankvol.estimators` — capitalization panels
  and the rank-based estimators computed from them.
* :mod:`rankvol.calibrate` — the end-to-end calibration pipeline, fit
  reports and the market-return trade-off sweep.
* :mod:`rankvol.portfolios` — allocation rules, wealth dynamics and
  functional-generation diagnostics.

File formats and the command line surface live in :mod:`rankvol.io` and
:mod:`rankvol.cli`.
"""

__version__ = "0.1.0"

from .calibrate import (
    CalibrationResult,
    FitReport,
    RankVolCalibrator,
    SweepResult,
    calibrate,
    fit_report,
    implied_phi,
    lambda_sweep,
    out_of_sample_errors,
    rebuild_growth_rates,
)
from .errors import (
    BankruptcyError,
    DataQualityError,
    DataQualityWarning,
    DegenerateHorizonError,
    InconsistentInputsError,
    IngestionError,
    InvalidInputError,
    NumericalBlowupError,
    PartialResultError,
    RankVolError,
)
from .estimators import (
    EstimateSet,
    a_hat,
    lambda_hat,
    lambda_hat_log,
    leakage_check,
    moment_hats,
    phi_hat,
    phibar_hat,
    sigma2_hat,
    sigma2_hat_ranked_variant,
    uniform_smooth,
)
from .model import (
    FellerReport,
    MarketState,
    ModelParams,
    RankedView,
    feller_check,
    market_spot_variance,
    rank_names,
)
from .panel import PanelData, ingest_panel, panel_from_trajectory, split_panel
from .portfolios import (
    FgpDecomposition,
    PortfolioRule,
    WealthPath,
    diversity_measure,
    excess_growth_lower_bound,
    excess_growth_rate,
    fgp_decompose,
    growth_optimal_qp_oracle,
    portfolio_weights,
    t_star,
    wealth_path,
)
from .simulate import (
    SimConfig,
    StationaryMoments,
    Trajectory,
    simulate_path,
    simulate_path_given_increments,
    simulate_paths,
    stationary_moments,
    step_weights,
    terminal_states,
)

__all__ = [name for name in dir() if not name.startswith("_")]
