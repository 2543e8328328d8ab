//! Inference of demographic and psychometric attributes from digital
//! behaviour logs.
//!
//! The pipeline runs end to end on plain files: behaviour logs and survey
//! responses are ingested into a validated [`ingest::Cohort`], questionnaire
//! answers are scored and median-binarized into prediction targets
//! ([`psych`]), per-user visit counts become sparse feature matrices
//! ([`matrix`]), a from-scratch random forest ([`forest`]) is trained and
//! tuned under nested cross-validation ([`eval`]), and the experiment
//! drivers ([`experiments`]) produce attribute tables and sensitivity
//! curves. Because real behavioural panels are proprietary, [`synth`]
//! generates cohorts with planted item/attribute associations and a known
//! separability ceiling, which the test suite uses as its oracle.
//!
//! Everything is deterministic: a single root seed fans out to every
//! sampling decision, and repeated runs produce byte-identical artifacts.

pub mod eval;
pub mod experiments;
pub mod forest;
pub mod ingest;
pub mod jobs;
pub mod matrix;
pub mod psych;
pub mod rng;
pub mod stats;
pub mod synth;

pub use eval::{auroc, nested_cv, one_vs_all_eval, weighted_auroc, CvConfig, CvReport, RocResult};
pub use forest::{train_forest, Criterion, ForestModel, HyperGrid, HyperParams};
pub use ingest::{
    filter_min_activity, parse_behavior_log, parse_survey, summarize_cohort, BehaviorEvent, Cohort,
    Modality, SurveyRecord, UserId,
};
pub use matrix::{SelectionMode, SelectionPlan, SparseMatrix, Vocabulary};
pub use psych::{
    assemble_targets, binarize_at_median, derive_superfoundations, score_mfq, score_pvq,
    BinaryLabel, Keying, MoralScores, TargetTable, ValueScores,
};
pub use synth::{generate_cohort, GeneratorLedger, GeneratorSpec};
