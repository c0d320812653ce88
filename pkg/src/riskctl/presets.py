"""Default decumulation problem instance.

A retiree draws down an account over 30 years: annual withdrawals are
constrained to [35, 60] (thousands, real), the remainder is split between
a risky and a risk-free asset, and the objective trades expected total
withdrawals against the 5% CVaR of terminal wealth with weight 1.
"""

from __future__ import annotations

from .recursion import ConstraintSpec, decumulation_dynamics
from .scenarios import KouParams, TimeGrid

INITIAL_WEALTH = 1000.0
XI_DOMAIN = (-5.0e5, 5.0e5)
CVAR_ALPHA = 0.05
GAMMA = 1.0


def calibrated_market() -> KouParams:
    """Annualized, inflation-adjusted jump-diffusion calibration."""
    return KouParams(
        mu=0.0774,
        sigma=0.1202,
        lam=0.3243,
        p_up=0.3793,
        eta1=7.7209,
        eta2=5.9989,
        r_f=0.0126,
    )


def retirement_grid() -> TimeGrid:
    return TimeGrid(horizon_years=30.0, num_periods=30)


def retirement_constraints() -> ConstraintSpec:
    return ConstraintSpec(q_min=35.0, q_max=60.0, num_assets=2)


def decumulation_instance():
    """(market, grid, constraints, dynamics, w0) for the default problem."""
    return (
        calibrated_market(),
        retirement_grid(),
        retirement_constraints(),
        decumulation_dynamics(),
        INITIAL_WEALTH,
    )
