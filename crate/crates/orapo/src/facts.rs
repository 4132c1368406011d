//! FactS: fact-level entailment reward for generated reports.
//!
//! A report is scored in three deterministic steps:
//!
//! 1. **Extract** atomic finding statements from the report text (one fact
//!    per sentence: a label name plus a polarity from negation cues).
//! 2. **Entail** the fact set against the fixed label panel, producing a
//!    per-label status (asserted / negated / unmentioned) and a predicted
//!    bit vector.
//! 3. **Score** the prediction against the ground-truth bits as
//!
//!    ```text
//!    reward = (1 + beta^2) * P * R / (beta^2 * P + R + xi)
//!    ```
//!
//!    with `beta > 1` weighting recall (missed positive findings cost more
//!    than unsupported claims) and `xi` a small stability constant.
//!
//! Negated statements about a truly present finding are contradictions and
//! count as false positives; they also leave the label unrecovered, so the
//! miss still shows up in recall.
//!
//! The extractor is rule based and total: junk sentences are skipped and
//! counted, never fatal. It sits behind a single function so a model-based
//! extractor could be swapped in without touching the reward.

use rand::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Ordered label panel; position defines the label index everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    names: Vec<String>,
}

/// Default 14-finding chest X-ray panel.
const DEFAULT_LABELS: [&str; 14] = [
    "enlarged cardiomediastinum",
    "cardiomegaly",
    "lung opacity",
    "lung lesion",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural effusion",
    "pleural thickening",
    "emphysema",
    "fracture",
    "support devices",
];

impl Default for LabelSet {
    fn default() -> Self {
        Self::new(DEFAULT_LABELS.iter().map(|s| s.to_string()).collect()).unwrap()
    }
}

impl LabelSet {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("label set must not be empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            let lower = n.to_lowercase();
            if lower.trim().is_empty() {
                return Err(Error::Config("empty label name".into()));
            }
            if !seen.insert(lower) {
                return Err(Error::Config(format!("duplicate label name: {n}")));
            }
        }
        Ok(Self { names })
    }

    /// One label per line; blank lines and `#` comments ignored.
    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let names: Vec<String> = text
            .lines()
            .map(|l| l.trim())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| l.to_string())
            .collect();
        Self::new(names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, label: usize) -> &str {
        &self.names[label]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        let lower = name.to_lowercase();
        self.names.iter().position(|n| n.to_lowercase() == lower)
    }
}

/// Statement polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

/// One atomic finding statement recovered from a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub label: usize,
    pub polarity: Polarity,
    pub source_sentence: usize,
}

impl Fact {
    pub fn assert(label: usize, source_sentence: usize) -> Self {
        Self { label, polarity: Polarity::Positive, source_sentence }
    }

    pub fn negate(label: usize, source_sentence: usize) -> Self {
        Self { label, polarity: Polarity::Negative, source_sentence }
    }
}

/// Ground-truth label bits for one study.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub labels: Vec<bool>,
}

impl GroundTruth {
    pub fn new(labels: Vec<bool>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&b| b).count()
    }
}

/// Per-label entailment status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelStatus {
    Asserted,
    Negated,
    Unmentioned,
}

/// Label-level predictions induced by a fact set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntailmentOutcome {
    pub status: Vec<LabelStatus>,
    /// `z_hat[l] == true` iff `status[l] == Asserted`.
    pub z_hat: Vec<bool>,
}

/// F-beta reward configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardConfig {
    /// Recall weight; > 1 favours recall.
    pub beta: f64,
    /// Stability constant in the denominator.
    pub xi: f64,
    /// Rewards at or below this value count as "zero" for ZRR purposes.
    pub zero_threshold: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { beta: 2.0, xi: 1e-6, zero_threshold: 0.0 }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if !(self.xi > 0.0) {
            return Err(Error::Config("xi must be positive".into()));
        }
        Ok(())
    }

    /// Highest reward the F-beta form can reach (P = R = 1).
    pub fn max_reward(&self) -> f64 {
        let b2 = self.beta * self.beta;
        (1.0 + b2) / (1.0 + b2 + self.xi)
    }
}

const POSITIVE_TEMPLATES: [&str; 3] = ["There is {}.", "{} is present.", "Findings consistent with {}."];
const NEGATIVE_TEMPLATES: [&str; 3] = ["No {}.", "No evidence of {}.", "{} is absent."];

/// Negation cues checked against the lowercased sentence.
const NEGATION_CUES: [&str; 4] = ["no ", "no evidence of", "absent", "without"];

/// Render facts as a report, one templated sentence per fact, in order.
/// Template choice is deterministic in `style_seed`.
pub fn render_report(facts: &[Fact], labels: &LabelSet, style_seed: u64) -> String {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(style_seed);
    let mut sentences = Vec::with_capacity(facts.len());
    for fact in facts {
        let bank = match fact.polarity {
            Polarity::Positive => &POSITIVE_TEMPLATES,
            Polarity::Negative => &NEGATIVE_TEMPLATES,
        };
        let template = bank[rng.random_range(0..bank.len())];
        sentences.push(template.replace("{}", labels.name(fact.label)));
    }
    sentences.join(" ")
}

/// Extraction result: recovered facts plus how many sentences matched
/// no label at all.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extraction {
    pub facts: Vec<Fact>,
    pub skipped_sentences: usize,
}

/// Rule-based fact extraction. Never fails: sentences with no label
/// mention are skipped and counted.
///
/// Per sentence the label is found by longest name match (ties break
/// toward the earlier label) and the polarity is negative exactly when a
/// negation cue occurs anywhere in the sentence.
pub fn extract_facts(text: &str, labels: &LabelSet) -> Extraction {
    let mut facts = Vec::new();
    let mut skipped = 0usize;
    let lowered_names: Vec<String> = labels.names().iter().map(|n| n.to_lowercase()).collect();
    for (idx, raw) in text.split('.').enumerate() {
        let sentence = raw.trim();
        if sentence.is_empty() {
            continue;
        }
        let lower = sentence.to_lowercase();
        let mut best: Option<usize> = None;
        for (l, name) in lowered_names.iter().enumerate() {
            if lower.contains(name.as_str()) {
                match best {
                    Some(b) if lowered_names[b].len() >= name.len() => {}
                    _ => best = Some(l),
                }
            }
        }
        match best {
            Some(label) => {
                let negative = NEGATION_CUES.iter().any(|cue| lower.contains(cue));
                let polarity = if negative { Polarity::Negative } else { Polarity::Positive };
                facts.push(Fact { label, polarity, source_sentence: idx });
            }
            None => skipped += 1,
        }
    }
    Extraction { facts, skipped_sentences: skipped }
}

/// Map a fact set to per-label predictions; conflicting mentions resolve
/// by last mention wins.
pub fn entail(facts: &[Fact], labels: &LabelSet) -> EntailmentOutcome {
    let mut status = vec![LabelStatus::Unmentioned; labels.len()];
    for fact in facts {
        if fact.label < status.len() {
            status[fact.label] = match fact.polarity {
                Polarity::Positive => LabelStatus::Asserted,
                Polarity::Negative => LabelStatus::Negated,
            };
        }
    }
    let z_hat = status.iter().map(|s| *s == LabelStatus::Asserted).collect();
    EntailmentOutcome { status, z_hat }
}

/// F-beta reward over the per-label confusion counts.
///
/// TP: asserted and present. FP: asserted-but-absent plus negated-but-
/// present (contradictions). FN: present labels that earned no TP.
/// P = 0 when nothing was asserted or contradicted; R = 1 when the study
/// has no positive labels (vacuous recall).
pub fn facts_reward(outcome: &EntailmentOutcome, gt: &GroundTruth, cfg: &RewardConfig) -> f64 {
    debug_assert_eq!(outcome.status.len(), gt.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut positives = 0usize;
    for (status, &present) in outcome.status.iter().zip(&gt.labels) {
        if present {
            positives += 1;
        }
        match (status, present) {
            (LabelStatus::Asserted, true) => tp += 1,
            (LabelStatus::Asserted, false) => fp += 1,
            (LabelStatus::Negated, true) => fp += 1,
            _ => {}
        }
    }
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if positives == 0 { 1.0 } else { tp as f64 / positives as f64 };
    let b2 = cfg.beta * cfg.beta;
    (1.0 + b2) * p * r / (b2 * p + r + cfg.xi)
}

/// Full scoring pipeline output; intermediates kept for interpretability.
#[derive(Debug, Clone)]
pub struct ScoredReport {
    pub reward: f64,
    pub outcome: EntailmentOutcome,
    pub extraction: Extraction,
}

/// Extract, entail, and score a report against the ground truth.
pub fn score_report(text: &str, gt: &GroundTruth, labels: &LabelSet, cfg: &RewardConfig) -> ScoredReport {
    let extraction = extract_facts(text, labels);
    let outcome = entail(&extraction.facts, labels);
    let reward = facts_reward(&outcome, gt, cfg);
    ScoredReport { reward, outcome, extraction }
}
