"""Synthetic control with multiple outcomes.

Simplex-weighted donor matching on stacked, optionally demeaned
pre-treatment outcomes, with permutation inference, placebo backdating
and a Monte Carlo harness for estimator comparisons.
"""

from .estimator import (
    EffectEstimate,
    SCFit,
    SolverOptions,
    backdate,
    estimate_effect_on_untreated,
    estimate_effects,
    fit_single_outcome,
    fit_synthetic_control,
)
from .inference import PermutationResult, permutation_test, reject_at_alpha, rmspe
from .panel import PanelDataset, PanelFormatError, ValidationReport, load_panel, validate_panel, write_panel
from .prep import MatchingMatrix, MatchSpec, MatchSpecError, assemble_matching_matrix
from .solver import WeightVector, project_simplex, solve_simplex_ls

__version__ = "0.1.0"

__all__ = [
    "EffectEstimate",
    "MatchSpec",
    "MatchSpecError",
    "MatchingMatrix",
    "PanelDataset",
    "PanelFormatError",
    "PermutationResult",
    "SCFit",
    "SolverOptions",
    "ValidationReport",
    "WeightVector",
    "assemble_matching_matrix",
    "backdate",
    "estimate_effect_on_untreated",
    "estimate_effects",
    "fit_single_outcome",
    "fit_synthetic_control",
    "load_panel",
    "permutation_test",
    "project_simplex",
    "reject_at_alpha",
    "rmspe",
    "solve_simplex_ls",
    "validate_panel",
    "write_panel",
]
