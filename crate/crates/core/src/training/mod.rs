//! Objective, optimization loop, cross-validation, metrics, synthetic cohorts
//! and post-hoc explanations.

pub mod cohort;
pub mod config;
pub mod cv;
pub mod explain;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod train;

pub use cohort::{Cohort, Subject, SubjectRecord};
pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use cv::{stratified_kfold, Fold};
pub use explain::{explain_attention, explain_biomarkers, AttentionReport, RoiScore};
pub use metrics::{Metrics, MetricsReport};
pub use model::{total_loss, Model, Population};
pub use synthetic::{generate_synthetic_cohort, SyntheticCohort, SyntheticCohortSpec};
pub use train::{cross_validate, evaluate, infer_all, predict, train, Inference, CvResult, FoldResult, HistoryRow, TrainOutcome};
