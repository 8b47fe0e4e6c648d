"""Monte Carlo CVA valuation and risk-minimizing hedging with interacting default intensities."""

from .claims import (
    ClaimSpec,
    Portfolio,
    dividend_cumulative,
    flip_state,
    make_bond,
    make_cds,
    make_first_to_default,
    zero_claim,
)
from .closed_forms import OracleConfig, StateFormula, bond_oracle, cds_oracle, ftd_oracle
from .cva import ExposureRecord, claim_price, cva_value, exposure, theta_ensemble, theta_stream
from .errors import ConfigError, DegenerateHedgeError, DomainError, EstimatorError, SimulationError
from .fk_engine import (
    CauchySpec,
    Estimate,
    EstimatorConfig,
    estimate_F_direct,
    estimate_F_recursive,
    estimate_g,
    gradient_x,
    jump_difference,
)
from .hedging import (
    CdsHedgeInstrument,
    HedgeReport,
    full_strategy,
    gkw_diagnostics,
    phi,
    replay,
    theta_gkw,
    u_terms,
)
from .model import (
    DefaultState,
    MarketEnsemble,
    MarketPath,
    ModelParams,
    SimConfig,
    feller_check,
    simulate_diffusion_only,
    simulate_market,
)
from .surfaces import PortfolioSurfaces

__all__ = [
    "CauchySpec", "CdsHedgeInstrument", "ClaimSpec", "ConfigError", "DefaultState", "DegenerateHedgeError",
    "DomainError", "Estimate", "EstimatorConfig", "EstimatorError", "ExposureRecord", "HedgeReport",
    "MarketEnsemble", "MarketPath", "ModelParams", "OracleConfig", "Portfolio", "PortfolioSurfaces",
    "SimConfig", "SimulationError", "StateFormula", "bond_oracle", "cds_oracle", "claim_price", "cva_value",
    "dividend_cumulative", "estimate_F_direct", "estimate_F_recursive", "estimate_g", "exposure",
    "feller_check", "flip_state", "ftd_oracle", "full_strategy", "gkw_diagnostics", "gradient_x",
    "jump_difference", "make_bond", "make_cds", "make_first_to_default", "phi", "replay",
    "simulate_diffusion_only", "simulate_market", "theta_ensemble", "theta_gkw", "theta_stream", "u_terms",
    "zero_claim",
]
