//! Desk-scale reinforcement-learning lab for report-generation policies.
//!
//! The crate trains a tiny autoregressive token policy on a synthetic
//! report-generation task and compares two optimizers:
//!
//! 1. **GRPO** — critic-free policy gradients with group-normalised
//!    advantages and a clipped PPO ratio ([`grpo`]).
//! 2. **OraPO** — GRPO plus an adaptive DPO "education" term that prefers
//!    the ground-truth report over sampled rollouts, weighted per prompt by
//!    an EMA-smoothed zero-reward rate ([`dpo`], [`mix`]).
//!
//! Rewards come from **FactS** ([`facts`]): atomic finding statements are
//! extracted from the generated report, entailed against the ground-truth
//! label vector, and scored as a recall-weighted F-beta.
//!
//! [`env`] generates synthetic studies, [`metrics`] computes macro-averaged
//! clinical-effectiveness metrics, and [`trainer`] orchestrates full runs
//! with CSV telemetry and binary checkpoints.

pub mod config;
pub mod dpo;
pub mod env;
pub mod facts;
pub mod grpo;
pub mod io;
pub mod metrics;
pub mod mix;
pub mod policy;
pub mod trainer;

pub use dpo::{DpoConfig, DpoVariant, NegativesPolicy, PreferencePair};
pub use env::{EnvConfig, PrevalenceProfile, StudyRecord};
pub use facts::{EntailmentOutcome, Fact, GroundTruth, LabelSet, Polarity, RewardConfig};
pub use grpo::{GrpoConfig, GrpoVariant};
pub use mix::{MixSchedule, ZrrGranularity, ZrrState};
pub use policy::{ContextVec, PolicyParams, RolloutGroup, SamplerConfig, TokenSeq, Vocabulary};
pub use trainer::{Algorithm, RunConfig, TrainOutput};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration (dimension mismatch, bad hyperparameter, ...).
    #[error("configuration error: {0}")]
    Config(String),
    /// Invalid runtime input (token out of range, NaN reward, ...).
    #[error("input error: {0}")]
    Input(String),
    /// Malformed file content.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    /// IO error.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Training aborted (non-finite loss); carries a diagnostic dump.
    #[error("training aborted: {0}")]
    Abort(String),
}

pub type Result<T> = std::result::Result<T, Error>;
