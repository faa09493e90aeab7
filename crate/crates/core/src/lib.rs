//! Ordinal conformal prediction with group-aware calibration and
//! survey-weighted fairness auditing.
//!
//! The pipeline: load or synthesize survey data ([`data`],
//! [`synthetic`]), partition respondents with guarded stratification
//! ([`splitter`]), fit or ingest probabilistic predictors
//! ([`predictors`]), calibrate conformal thresholds — global,
//! per-group, regularized, or survey-weighted ([`conformal`]) —
//! evaluate design-weighted coverage, subgroup gaps, and set sizes
//! ([`evaluation`]), and orchestrate the whole multi-split experiment
//! with integrity checks and reproducible content hashing
//! ([`harness`]).
//!
//! Everything is deterministic given a master seed: random draws come
//! from counter-based streams ([`rng`]), and split-level work runs in
//! parallel (the default `parallel` feature) or sequentially with
//! byte-identical output ([`exec`]).

pub mod conformal;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod harness;
pub mod numeric;
pub mod predictors;
pub mod rng;
pub mod splitter;
pub mod synthetic;

pub use conformal::{
    calibrate, conformal_quantile, coverage_floor, mse_optimal_weight, ordinal_score,
    predict_sets, score_calibration, shrinkage_weight, Method, PredictOptions, PredictionSet,
    ScoreRecord, ThresholdSet,
};
pub use data::{
    load_dataset, save_dataset, DatasetSchema, GroupTable, ProbabilityMatrix, RespondentRecord,
    SurveyDataset,
};
pub use error::{AuditError, Result};
pub use evaluation::{
    evaluate_split, paired_stats, weighted_coverage, weighted_gap, weighted_group_coverage,
    weighted_size, PairedDelta, SplitResult,
};
pub use exec::ExecMode;
pub use harness::{
    mechanism_study, run_experiment, verify_hashes, DataSource, ExperimentConfig,
    ExperimentReport, MechanismConfig, ModelSource,
};
pub use splitter::{make_splits, verify_split, Partition, SplitAssignment};
pub use synthetic::{generate, ExchangeableSampler, GeneratorConfig};
