"""Dirichlet-process mixture Cox regression for clustered unmeasured confounding."""

from .data import Dataset, DesignSelector, FULL_DESIGN, INFEASIBLE_DESIGN, NAIVE_DESIGN, SurvivalRecord

__all__ = [
    "Dataset",
    "DesignSelector",
    "FULL_DESIGN",
    "INFEASIBLE_DESIGN",
    "NAIVE_DESIGN",
    "SurvivalRecord",
]
__version__ = "0.1.0"
