"""Model-based clustering of mixed continuous, ordinal and nominal data.

A latent Gaussian mixture with diagonal, parsimoniously decomposed
covariance generates the observed columns; fitting is by (Monte Carlo) EM
and model choice by an approximated BIC.
"""
from .dataset import ColumnSpec, MixedDataset, ThresholdSet, compute_thresholds, load_dataset, write_dataset
from .em import EStepQuantities, FitConfig, FitResult, e_step, fit, initialize, m_step
from .kernels import (LatentLayout, build_layout, nominal_mc_table, ordinal_interval_prob,
                      truncated_normal_moments)
from .params import (ALL_MODELS, CovModel, ModelParams, count_free_parameters, enforce_identifiability,
                     sigma_diagonal)
from .selection import SelectionReport, approx_loglik, bic_hat, grid_search
from .simulate import GeneratorSpec, adjusted_rand, cross_tab, shipped_spec, simulate

__version__ = "0.1.0"

__all__ = [
    "ALL_MODELS", "ColumnSpec", "CovModel", "EStepQuantities", "FitConfig", "FitResult", "GeneratorSpec",
    "LatentLayout", "MixedDataset", "ModelParams", "SelectionReport", "ThresholdSet", "adjusted_rand",
    "approx_loglik", "bic_hat", "build_layout", "compute_thresholds", "count_free_parameters",
    "cross_tab", "e_step", "enforce_identifiability", "fit", "grid_search", "initialize",
    "load_dataset", "m_step", "nominal_mc_table", "ordinal_interval_prob", "shipped_spec",
    "sigma_diagonal", "simulate", "truncated_normal_moments", "write_dataset",
]
