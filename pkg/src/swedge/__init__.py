"""Model-robust estimation of marginal treatment effects in stepped-wedge
cluster-randomized trials."""

from .data_model import DataError, RandomizationSpec, TrialData, load_trial_csv, validate
from .design import Structure, TreatmentEffectSpec, build_design
from .gee import RobustnessWarning, WorkingCorrelation, estimate_estimands_gee, fit_gee
from .lmm import Correlation, FitError, extract_estimands, fit_lmm, lrt_structures
from .report import EstimandReport, Scale, render
from .structured_cov import StructuredInverse, VarianceComponents

__version__ = "0.1.0"

__all__ = [
    "Correlation",
    "DataError",
    "EstimandReport",
    "FitError",
    "RandomizationSpec",
    "RobustnessWarning",
    "Scale",
    "Structure",
    "StructuredInverse",
    "TreatmentEffectSpec",
    "TrialData",
    "VarianceComponents",
    "WorkingCorrelation",
    "build_design",
    "estimate_estimands_gee",
    "extract_estimands",
    "fit_gee",
    "fit_lmm",
    "load_trial_csv",
    "lrt_structures",
    "render",
    "validate",
]
