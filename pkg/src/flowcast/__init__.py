"""flowcast: spatio-temporal forecasting on lattices with a learned,
state-dependent transition kernel and ensemble data assimilation."""

from .baselines import (
    KalmanResult,
    VanillaIdeParams,
    constant_transition,
    fit_window_ide,
    kalman_filter,
    persistence_forecast,
    vanilla_ide_forecast,
    window_posterior,
)
from .cnn import (
    AdamState,
    CnnArchitecture,
    CnnParams,
    adam_step,
    backward_batch,
    cnn_backward,
    cnn_forward,
    conv3d_stage,
    forward_batch,
    init_adam_state,
    init_cnn_params,
    maxpool2,
)
from .enkf import (
    DynamicsSummary,
    Ensemble,
    FilterConfig,
    FilterResult,
    Observations,
    TaperSpec,
    dynamics_summary,
    enkf_predict,
    enkf_update,
    forecast,
    gaspari_cohn,
    init_ensemble,
    run_filter,
)
from .estimators import ConvIdeForecaster, PersistenceForecaster, WindowedIdeForecaster
from .exceptions import (
    BadMagic,
    BorderTooLarge,
    CholeskyFailure,
    ConfigError,
    DegenerateFrame,
    DegenerateResiduals,
    DimensionMismatch,
    EmptyBatch,
    EmptyMask,
    FileError,
    FlowcastError,
    InsufficientFrames,
    InvertedInterval,
    MismatchedCoverage,
    NonFiniteLoss,
    NonpositiveDiffusion,
    NotPerfectSquare,
    NumericError,
    OddSide,
    OptimizerFailure,
    ShapeMismatch,
    ShapeMismatchOnLoad,
    SingularInnovation,
    SingularInnovationCov,
    StaleCache,
    TooManyPixels,
    TruncatedPayload,
    UnstableConfig,
    ValidationError,
)
from .fileio import (
    read_checkpoint,
    read_ensemble,
    read_flow,
    read_member_stack,
    read_observations_csv,
    read_sequence,
    write_checkpoint,
    write_dynamics_csv,
    write_ensemble,
    write_flow,
    write_member_stack,
    write_observations_csv,
    write_ratio_csv,
    write_report_csv,
    write_sequence,
    write_training_log_csv,
)
from .grid import (
    Field,
    FrameWindow,
    GridSpec,
    StandardizationRecord,
    interior_mask,
    standardize,
    unstandardize,
)
from .kernels import (
    DynamicsWeights,
    RbfBasis,
    ThetaFields,
    TransitionMatrix,
    build_rbf_basis,
    kernel_value,
    propagate,
    theta_fields,
    transition_matrix,
)
from .likelihood import (
    NoiseParams,
    SequenceDataset,
    TrainEpoch,
    TrainResult,
    TrainingConfig,
    cond_loglik_term,
    dataset_loglik,
    fit_residual_matern,
    matern32,
    minibatch_grad,
    noise_covariance,
    residual_fields,
    train_cnn,
)
from .metrics import (
    ScoreReport,
    coverage_90,
    crps_ensemble,
    crps_fields,
    crps_gaussian,
    ensemble_quantiles,
    gaussian_quantiles,
    interval_score_90,
    rmspe,
    score_ensemble_forecast,
    score_gaussian_forecast,
    score_ratio_table,
)
from .simulate import SimConfig, SimResult, sample_observations, simulate

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "CnnArchitecture",
    "CnnParams",
    "ConvIdeForecaster",
    "DynamicsSummary",
    "DynamicsWeights",
    "Ensemble",
    "Field",
    "FilterConfig",
    "FilterResult",
    "BadMagic",
    "BorderTooLarge",
    "CholeskyFailure",
    "ConfigError",
    "DegenerateFrame",
    "DegenerateResiduals",
    "DimensionMismatch",
    "EmptyBatch",
    "EmptyMask",
    "FileError",
    "FlowcastError",
    "InsufficientFrames",
    "InvertedInterval",
    "MismatchedCoverage",
    "NonFiniteLoss",
    "NonpositiveDiffusion",
    "NotPerfectSquare",
    "NumericError",
    "OddSide",
    "OptimizerFailure",
    "ShapeMismatch",
    "ShapeMismatchOnLoad",
    "SingularInnovation",
    "SingularInnovationCov",
    "StaleCache",
    "TooManyPixels",
    "TruncatedPayload",
    "UnstableConfig",
    "ValidationError",
    "FrameWindow",
    "GridSpec",
    "KalmanResult",
    "NoiseParams",
    "Observations",
    "PersistenceForecaster",
    "RbfBasis",
    "ScoreReport",
    "SequenceDataset",
    "SimConfig",
    "SimResult",
    "StandardizationRecord",
    "TaperSpec",
    "ThetaFields",
    "TrainEpoch",
    "TrainResult",
    "TrainingConfig",
    "dataset_loglik",
    "residual_fields",
    "TransitionMatrix",
    "VanillaIdeParams",
    "WindowedIdeForecaster",
    "adam_step",
    "build_rbf_basis",
    "backward_batch",
    "cnn_backward",
    "conv3d_stage",
    "forward_batch",
    "maxpool2",
    "cnn_forward",
    "cond_loglik_term",
    "constant_transition",
    "coverage_90",
    "crps_ensemble",
    "crps_fields",
    "ensemble_quantiles",
    "gaussian_quantiles",
    "score_ensemble_forecast",
    "score_gaussian_forecast",
    "crps_gaussian",
    "dynamics_summary",
    "enkf_predict",
    "enkf_update",
    "fit_residual_matern",
    "fit_window_ide",
    "forecast",
    "gaspari_cohn",
    "init_adam_state",
    "init_cnn_params",
    "init_ensemble",
    "interior_mask",
    "interval_score_90",
    "kalman_filter",
    "kernel_value",
    "matern32",
    "minibatch_grad",
    "noise_covariance",
    "persistence_forecast",
    "propagate",
    "read_checkpoint",
    "read_ensemble",
    "read_flow",
    "read_member_stack",
    "read_observations_csv",
    "read_sequence",
    "rmspe",
    "run_filter",
    "sample_observations",
    "score_ratio_table",
    "simulate",
    "standardize",
    "theta_fields",
    "train_cnn",
    "transition_matrix",
    "unstandardize",
    "vanilla_ide_forecast",
    "window_posterior",
    "write_checkpoint",
    "write_dynamics_csv",
    "write_ensemble",
    "write_flow",
    "write_member_stack",
    "write_observations_csv",
    "write_ratio_csv",
    "write_report_csv",
    "write_sequence",
    "write_training_log_csv",
]
