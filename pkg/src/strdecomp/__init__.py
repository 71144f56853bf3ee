"""Seasonal-trend decomposition by regularized regression.

A series is split into a smooth trend, seasonal surfaces on cyclic or
branching season topologies, covariate effects and a remainder by solving a
single penalized least-squares problem.  Smoothing parameters can be chosen
by cross-validation.
"""

from __future__ import annotations

from .cv import CvConfig, kfold_assign, kfold_score, loocv_score, optimize_lambdas
from .estimator import (
    FitResult,
    ar1_covariance,
    confidence_intervals,
    fit,
    fit_gls,
    fit_ols,
    fit_robust,
    forecast,
)
from .model import (
    CovariateSpec,
    DesignSystem,
    ModelSpec,
    SeasonalSpec,
    TimeSeriesData,
    assemble,
    build_extraction,
    split_components,
)
from .simgen import SimConfig, gen_deterministic, gen_stochastic, rmse_experiment
from .sparsemat import RankDeficiencyError, columnwise_inverse_diagonal, from_triplets, matvec, normal_equations_solve
from .topology import SeasonTopology, build_penalties, build_trend_penalty, make_cycle, make_graph, make_two_cylinder

__all__ = [
    "CovariateSpec",
    "CvConfig",
    "DesignSystem",
    "FitResult",
    "ModelSpec",
    "RankDeficiencyError",
    "SeasonTopology",
    "SeasonalSpec",
    "SimConfig",
    "TimeSeriesData",
    "ar1_covariance",
    "assemble",
    "build_extraction",
    "build_penalties",
    "build_trend_penalty",
    "columnwise_inverse_diagonal",
    "confidence_intervals",
    "fit",
    "fit_gls",
    "fit_ols",
    "fit_robust",
    "forecast",
    "from_triplets",
    "gen_deterministic",
    "gen_stochastic",
    "kfold_assign",
    "kfold_score",
    "loocv_score",
    "make_cycle",
    "make_graph",
    "make_two_cylinder",
    "matvec",
    "normal_equations_solve",
    "optimize_lambdas",
    "rmse_experiment",
    "split_components",
]
