//! Macro-averaged clinical-effectiveness metrics and run telemetry.
//!
//! Predictions come from the same fact-entailment pipeline that produces
//! training rewards, applied symmetrically to generated and ground-truth
//! sides. Per label: P = TP/(TP+FP) (0 when undefined), R = TP/(TP+FN)
//! (1 when the label never occurs), F1 harmonic (0 when both components
//! vanish); the macro numbers are unweighted means so rare and frequent
//! findings count equally.

use crate::{Error, Result};

/// Per-label confusion counters over an evaluation set. Mergeable, so
/// shards can be tallied independently and combined.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionTally {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    tn: Vec<u64>,
    examples: u64,
}

impl ConfusionTally {
    pub fn new(label_count: usize) -> Self {
        Self {
            tp: vec![0; label_count],
            fp: vec![0; label_count],
            fn_: vec![0; label_count],
            tn: vec![0; label_count],
            examples: 0,
        }
    }

    pub fn label_count(&self) -> usize {
        self.tp.len()
    }

    pub fn examples(&self) -> u64 {
        self.examples
    }

    /// Add one (prediction, truth) pair of bit vectors.
    pub fn record(&mut self, z_hat: &[bool], z_star: &[bool]) -> Result<()> {
        if z_hat.len() != self.tp.len() || z_star.len() != self.tp.len() {
            return Err(Error::Config(format!(
                "tally over {} labels got vectors of length {} and {}",
                self.tp.len(),
                z_hat.len(),
                z_star.len()
            )));
        }
        for l in 0..self.tp.len() {
            match (z_hat[l], z_star[l]) {
                (true, true) => self.tp[l] += 1,
                (true, false) => self.fp[l] += 1,
                (false, true) => self.fn_[l] += 1,
                (false, false) => self.tn[l] += 1,
            }
        }
        self.examples += 1;
        Ok(())
    }

    /// Combine two tallies (associative and commutative).
    pub fn merge(&mut self, other: &ConfusionTally) {
        debug_assert_eq!(self.tp.len(), other.tp.len());
        for l in 0..self.tp.len() {
            self.tp[l] += other.tp[l];
            self.fp[l] += other.fp[l];
            self.fn_[l] += other.fn_[l];
            self.tn[l] += other.tn[l];
        }
        self.examples += other.examples;
    }

    pub fn counts(&self, label: usize) -> (u64, u64, u64, u64) {
        (self.tp[label], self.fp[label], self.fn_[label], self.tn[label])
    }

    /// Per-label precision, recall, and F1 under the stated conventions.
    pub fn label_prf(&self, label: usize) -> (f64, f64, f64) {
        let tp = self.tp[label] as f64;
        let fp = self.fp[label] as f64;
        let fn_ = self.fn_[label] as f64;
        let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let r = if tp + fn_ == 0.0 { 1.0 } else { tp / (tp + fn_) };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        (p, r, f1)
    }

    pub fn per_label_f1(&self) -> Vec<f64> {
        (0..self.tp.len()).map(|l| self.label_prf(l).2).collect()
    }

    /// Unweighted means across labels.
    pub fn macro_prf(&self) -> (f64, f64, f64) {
        let l = self.tp.len() as f64;
        let mut sums = (0.0, 0.0, 0.0);
        for label in 0..self.tp.len() {
            let (p, r, f1) = self.label_prf(label);
            sums.0 += p;
            sums.1 += r;
            sums.2 += f1;
        }
        (sums.0 / l, sums.1 / l, sums.2 / l)
    }
}

/// One training step's summary.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    /// Batch mean reward was at or below the zero threshold.
    pub zero_reward_batch: bool,
    pub mean_weight: f64,
    pub mean_reward: f64,
    pub total_loss: f64,
    pub mean_grpo_loss: f64,
    pub mean_dpo_loss: f64,
}

/// Evaluation snapshot taken at a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMetrics {
    pub step: u64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_label_f1: Vec<f64>,
}

/// Full per-run telemetry: one record per step, one metrics row per
/// checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunTelemetry {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<CheckpointMetrics>,
}

impl RunTelemetry {
    /// Mean F1 over a set of label indices at a checkpoint.
    pub fn rare_f1(metrics: &CheckpointMetrics, rare_labels: &[usize]) -> f64 {
        if rare_labels.is_empty() {
            return 0.0;
        }
        rare_labels.iter().map(|&l| metrics.per_label_f1[l]).sum::<f64>() / rare_labels.len() as f64
    }
}

/// Cumulative fraction of steps up to `upto_step` whose batch mean reward
/// was at or below the zero threshold.
pub fn zero_reward_fraction(telemetry: &RunTelemetry, upto_step: u64) -> f64 {
    let considered: Vec<&StepRecord> =
        telemetry.steps.iter().filter(|s| s.step <= upto_step).collect();
    if considered.is_empty() {
        return 0.0;
    }
    let zeros = considered.iter().filter(|s| s.zero_reward_batch).count();
    zeros as f64 / considered.len() as f64
}
