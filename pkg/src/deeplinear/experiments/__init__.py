"""Reproduction harness: learning-rate sweeps, Monte Carlo probability checks
and the failure constructions."""

from .failures import FailureResult, failure_no_margin, failure_unbalanced
from .montecarlo import MCReport, mc_balance_probability, mc_margin_implies_sigma, mc_margin_probability
from .sweep import SweepResult, balancedness_trace, default_lr_grid, std_sweep

__all__ = [
    "FailureResult",
    "MCReport",
    "SweepResult",
    "balancedness_trace",
    "default_lr_grid",
    "failure_no_margin",
    "failure_unbalanced",
    "mc_balance_probability",
    "mc_margin_implies_sigma",
    "mc_margin_probability",
    "std_sweep",
]
