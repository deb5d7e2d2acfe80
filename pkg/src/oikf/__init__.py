"""Outlier-insensitive Kalman filtering with a normal-unknown-variance outlier prior."""

from .baselines import Chi2Config, chi2_gated_update, chi2_threshold
from .dataio import read_trajectory, write_trajectory
from .evaluation import (
    MetricsReport,
    SweepResult,
    compute_metrics,
    convergence_trace_experiment,
    grid_search,
    mse_vs_r_experiment,
)
from .filtering import Engine, FilterResult, SingularStepError, filter_batch, filter_series
from .kalman import GaussianBelief, SingularInnovationError, initial_belief, predict, update
from .nuv import OikfConfig, StepDiagnostics, Variant, oikf_step
from .ssmodel import (
    ObservationSeries,
    OutlierSpec,
    SignMode,
    SystemModel,
    build_position_only_model,
    build_wna_model,
    inject_outliers,
    simulate_trajectory,
)

__all__ = [
    "Chi2Config",
    "chi2_gated_update",
    "chi2_threshold",
    "read_trajectory",
    "write_trajectory",
    "MetricsReport",
    "SweepResult",
    "compute_metrics",
    "convergence_trace_experiment",
    "grid_search",
    "mse_vs_r_experiment",
    "Engine",
    "FilterResult",
    "SingularStepError",
    "filter_batch",
    "filter_series",
    "GaussianBelief",
    "SingularInnovationError",
    "initial_belief",
    "predict",
    "update",
    "OikfConfig",
    "StepDiagnostics",
    "Variant",
    "oikf_step",
    "ObservationSeries",
    "OutlierSpec",
    "SignMode",
    "SystemModel",
    "build_position_only_model",
    "build_wna_model",
    "inject_outliers",
    "simulate_trajectory",
]
