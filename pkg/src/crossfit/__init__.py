"""Estimation, inference, and simulation for balanced two-way crossed
mixed-effect models with interaction."""

from .covariance import (
    Lambdas,
    VarianceComponents,
    dense_v,
    lambdas_from,
    logdet_v,
    quad_form,
    vinv_apply,
)
from .design import (
    CovariateSet,
    Design,
    SuffStats,
    classify_covariates,
    compress,
    decompose_covariate,
    validate_design,
)
from .estimate import (
    FitOptions,
    FitResult,
    ParamVector,
    ScoreVector,
    expected_info_bn,
    expected_info_limit,
    fit_ml,
    gls_solve,
    loglik,
    score,
)
from .inference import (
    CiTable,
    CovarianceEstimate,
    InfluencePoint,
    MomentEstimates,
    confidence_intervals,
    fhat,
    fit_residuals,
    influence,
    residual_moments,
)
from .reml import AdjustmentTraces, adjustment_traces, fit_reml, reml_criterion, reml_score
from .simulate import SimConfig, SimReport, run_study

__version__ = "0.1.0"

__all__ = [
    "AdjustmentTraces",
    "CiTable",
    "CovarianceEstimate",
    "CovariateSet",
    "Design",
    "FitOptions",
    "FitResult",
    "InfluencePoint",
    "Lambdas",
    "MomentEstimates",
    "ParamVector",
    "ScoreVector",
    "SimConfig",
    "SimReport",
    "SuffStats",
    "VarianceComponents",
    "adjustment_traces",
    "classify_covariates",
    "compress",
    "confidence_intervals",
    "decompose_covariate",
    "dense_v",
    "expected_info_bn",
    "expected_info_limit",
    "fhat",
    "fit_ml",
    "fit_reml",
    "fit_residuals",
    "gls_solve",
    "influence",
    "lambdas_from",
    "logdet_v",
    "loglik",
    "quad_form",
    "reml_criterion",
    "reml_score",
    "residual_moments",
    "run_study",
    "score",
    "validate_design",
    "vinv_apply",
]
