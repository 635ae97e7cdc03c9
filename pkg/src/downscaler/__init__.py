"""Spatially-varying-coefficient downscaler for fusing point monitoring data
with gridded numerical-model output: univariate through p-variate, static and
space-time, with misalignment-aware MCMC fitting, posterior-predictive
downscaling/upscaling, kriging and cokriging baselines, proper-scoring-rule
evaluation, and an exact generative simulator."""

from .baselines import CokrigingModel, KrigingModel, cokrige, estimate_decay, krige
from .covariance import (
    Coregionalization,
    DecayParams,
    VariantPattern,
    chordal_km,
    closed_form_cov,
    exp_cov,
    great_circle_km,
    induced_joint_cov,
    latent_cov_matrix,
)
from .data import (
    AlignedDataset,
    DayPartition,
    Grid,
    GridOutput,
    Observation,
    Site,
    Transform,
    TransformSpec,
    assign_cell,
    back_transform,
    build_dataset,
    ingest_grid_outputs,
    ingest_monitoring,
    partition_day,
    split_train_validation,
    transform,
)
from .evaluation import (
    ScoreReport,
    coverage_and_width,
    crps_empirical,
    interval_score,
    pmae,
    pmse,
    sensitivity_sweep,
    site_ols_diagnostics,
)
from .geweke import geweke_test
from .inference import (
    ChainSamples,
    GibbsSampler,
    chain_diagnostics,
    dynamic_ffbs,
    effective_sample_size,
    run_chain,
    split_rhat,
)
from .model import (
    LocalTime,
    ModelSpec,
    OverallTime,
    Priors,
    TemporalStructure,
    default_spec,
    validate_spec,
)
from .prediction import (
    PredictionTarget,
    PredictiveSamples,
    bias_surface,
    block_average,
    contrast,
    predict,
)
from .simulator import GridFieldConfig, SimulatedTruth, TruthConfig, paper_scale_testbed, simulate

__version__ = "0.1.0"
