//! Synthetic study generator.
//!
//! Each study draws a ground-truth label vector from a prevalence profile,
//! embeds it into a noisy context vector (`ctx = s * E z + noise`, with a
//! fixed random unit-column embedding E per seed), and builds the
//! ground-truth report: assert tokens for every positive label followed by
//! a few pertinent-negative tokens, in label order, closed by EOS.
//!
//! Rare labels keep their configured prevalence (the default panel pins
//! pneumonia at 2.70% and fracture at 4.05%), which is what makes them hard:
//! a policy rarely sees them, and groups sampled on those studies tend to
//! earn no reward.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::facts::{extract_facts, render_report, Fact, GroundTruth, LabelSet, Polarity};
use crate::policy::{ContextVec, Mat, TokenSeq, Vocabulary};
use crate::{Error, Result};

/// Per-label positive rates plus optional pairwise odds couplings.
#[derive(Debug, Clone, PartialEq)]
pub struct PrevalenceProfile {
    pub marginals: Vec<f64>,
    /// `(a, b, odds_multiplier)`: when label `a` (a < b) is positive, the
    /// odds of label `b` are multiplied before sampling it.
    pub correlation_pairs: Vec<(usize, usize, f64)>,
    /// Indices treated as rare for balancing and rare-class metrics.
    pub rare_labels: Vec<usize>,
}

/// Default prevalences for the 14-label panel; indices follow
/// [`LabelSet::default`].
const DEFAULT_MARGINALS: [f64; 14] = [
    0.10,   // enlarged cardiomediastinum
    0.25,   // cardiomegaly
    0.30,   // lung opacity
    0.09,   // lung lesion
    0.22,   // edema
    0.12,   // consolidation
    0.027,  // pneumonia
    0.28,   // atelectasis
    0.08,   // pneumothorax
    0.30,   // pleural effusion
    0.07,   // pleural thickening
    0.06,   // emphysema
    0.0405, // fracture
    0.30,   // support devices
];

impl Default for PrevalenceProfile {
    fn default() -> Self {
        Self {
            marginals: DEFAULT_MARGINALS.to_vec(),
            correlation_pairs: Vec::new(),
            rare_labels: vec![6, 12], // pneumonia, fracture
        }
    }
}

impl PrevalenceProfile {
    pub fn validate(&self, label_count: usize) -> Result<()> {
        if self.marginals.len() != label_count {
            return Err(Error::Config(format!(
                "profile has {} marginals for {} labels",
                self.marginals.len(),
                label_count
            )));
        }
        if self.marginals.iter().any(|p| !(*p > 0.0 && *p < 1.0)) {
            return Err(Error::Config("marginals must lie in (0, 1)".into()));
        }
        for &(a, b, mult) in &self.correlation_pairs {
            if a >= b || b >= label_count {
                return Err(Error::Config(format!("bad correlation pair ({a}, {b})")));
            }
            if !(mult > 0.0) {
                return Err(Error::Config("odds multiplier must be positive".into()));
            }
        }
        if self.rare_labels.iter().any(|&l| l >= label_count) {
            return Err(Error::Config("rare label index out of range".into()));
        }
        Ok(())
    }

    /// `label<TAB>probability` per line; order must match the label set.
    pub fn from_file(path: &std::path::Path, labels: &LabelSet) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut marginals = vec![f64::NAN; labels.len()];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (name, prob) = line.split_once('\t').ok_or(Error::Parse {
                line: i + 1,
                msg: "expected label<TAB>probability".into(),
            })?;
            let label = labels.index_of(name.trim()).ok_or(Error::Parse {
                line: i + 1,
                msg: format!("unknown label {name:?}"),
            })?;
            marginals[label] = prob.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: i + 1,
                msg: format!("bad probability: {e}"),
            })?;
        }
        if let Some(missing) = marginals.iter().position(|p| p.is_nan()) {
            return Err(Error::Config(format!(
                "no prevalence given for label {:?}",
                labels.name(missing)
            )));
        }
        let mut profile = Self { marginals, ..Self::default() };
        profile.rare_labels = profile
            .marginals
            .iter()
            .enumerate()
            .filter(|(_, p)| **p < 0.05)
            .map(|(i, _)| i)
            .collect();
        profile.validate(labels.len())?;
        Ok(profile)
    }
}

/// Environment knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    /// Scale of the label-embedding signal in the context.
    pub signal_strength: f64,
    /// Standard deviation of the additive context noise.
    pub noise_std: f64,
    /// Pertinent negatives mentioned in each ground-truth report.
    pub negatives_mentioned: usize,
    /// Context dimension D.
    pub ctx_dim: usize,
    pub seed: u64,
    /// Redraw studies with no positive label, so every prompt has a
    /// reachable reward and the ground-truth report scores near 1.
    pub require_positive: bool,
    /// Balancing: minimum positive count per rare label in a dataset
    /// (0 disables).
    pub balance_min_positive: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            signal_strength: 3.0,
            noise_std: 1.0,
            negatives_mentioned: 2,
            ctx_dim: 32,
            seed: 7,
            require_positive: true,
            balance_min_positive: 50,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_std < 0.0 {
            return Err(Error::Config("noise_std must be nonnegative".into()));
        }
        if self.ctx_dim == 0 {
            return Err(Error::Config("ctx_dim must be positive".into()));
        }
        Ok(())
    }
}

/// One synthetic study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRecord {
    pub prompt_id: u64,
    pub ctx: ContextVec,
    pub z_star: GroundTruth,
    pub gt_report: TokenSeq,
    pub gt_text: String,
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const EMBEDDING_SALT: u64 = 0x9e3779b97f4a7c15;

/// Deterministic seed mixer (splitmix64 finalizer over the combined
/// words); used to derive independent streams from a base seed.
pub fn derive_seed(a: u64, b: u64) -> u64 {
    let mut x = a ^ b.wrapping_mul(0x2545f4914f6cdd1d);
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58476d1ce4e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d049bb133111eb);
    x ^= x >> 31;
    x
}

/// Map a token sequence to the finding statements it spells out; BOS and
/// EOS carry no clinical content and are skipped.
pub fn tokens_to_facts(vocab: &Vocabulary, seq: &TokenSeq) -> Vec<Fact> {
    use crate::policy::TokenKind;
    let mut facts = Vec::new();
    for &t in &seq.tokens {
        match vocab.kind(t) {
            Ok(TokenKind::Assert(l)) => facts.push(Fact::assert(l, facts.len())),
            Ok(TokenKind::Negate(l)) => facts.push(Fact::negate(l, facts.len())),
            _ => {}
        }
    }
    facts
}

/// Deterministic study source for a fixed (labels, profile, config) triple.
pub struct StudyGenerator {
    labels: LabelSet,
    vocab: Vocabulary,
    profile: PrevalenceProfile,
    cfg: EnvConfig,
    /// D×L label embedding with unit-norm columns, drawn once per seed.
    embedding: Mat,
}

impl StudyGenerator {
    pub fn new(labels: LabelSet, profile: PrevalenceProfile, cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        profile.validate(labels.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ EMBEDDING_SALT);
        let mut embedding = Mat::zeros(cfg.ctx_dim, labels.len());
        for l in 0..labels.len() {
            let mut norm2 = 0.0;
            let col: Vec<f64> = (0..cfg.ctx_dim)
                .map(|_| {
                    let g = gaussian(&mut rng);
                    norm2 += g * g;
                    g
                })
                .collect();
            let norm = norm2.sqrt().max(1e-12);
            for (d, g) in col.into_iter().enumerate() {
                *embedding.at_mut(d, l) = g / norm;
            }
        }
        let vocab = Vocabulary::new(labels.len());
        Ok(Self { labels, vocab, profile, cfg, embedding })
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn profile(&self) -> &PrevalenceProfile {
        &self.profile
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    fn sample_bits<R: Rng>(&self, rng: &mut R, forced: Option<usize>) -> Vec<bool> {
        loop {
            let mut z = vec![false; self.labels.len()];
            for l in 0..self.labels.len() {
                let mut p = self.profile.marginals[l];
                for &(a, b, mult) in &self.profile.correlation_pairs {
                    if b == l && z[a] {
                        let odds = p / (1.0 - p) * mult;
                        p = odds / (1.0 + odds);
                    }
                }
                z[l] = rng.random::<f64>() < p;
            }
            if let Some(f) = forced {
                z[f] = true;
            }
            if !self.cfg.require_positive || z.iter().any(|&b| b) {
                return z;
            }
        }
    }

    fn build_study<R: Rng>(&self, prompt_id: u64, z: Vec<bool>, rng: &mut R) -> StudyRecord {
        debug_assert_eq!(z.len(), self.labels.len());
        // ctx = signal * E z + noise
        let mut ctx = vec![0.0; self.cfg.ctx_dim];
        for (l, &bit) in z.iter().enumerate() {
            if bit {
                for (d, c) in ctx.iter_mut().enumerate() {
                    *c += self.cfg.signal_strength * self.embedding.at(d, l);
                }
            }
        }
        if self.cfg.noise_std > 0.0 {
            for c in ctx.iter_mut() {
                *c += self.cfg.noise_std * gaussian(rng);
            }
        }
        // Pertinent negatives: a deterministic draw of absent labels.
        let negative_labels: Vec<usize> = (0..z.len()).filter(|&l| !z[l]).collect();
        let mut chosen: Vec<usize> = Vec::new();
        let mut pool = negative_labels;
        let want = self.cfg.negatives_mentioned.min(pool.len());
        for _ in 0..want {
            let i = rng.random_range(0..pool.len());
            chosen.push(pool.swap_remove(i));
        }
        chosen.sort_unstable();
        let mut facts: Vec<Fact> = Vec::new();
        for (l, &bit) in z.iter().enumerate() {
            if bit {
                facts.push(Fact::assert(l, facts.len()));
            }
        }
        for &l in &chosen {
            facts.push(Fact::negate(l, facts.len()));
        }
        let mut tokens = Vec::with_capacity(facts.len() + 1);
        for f in &facts {
            tokens.push(match f.polarity {
                Polarity::Positive => self.vocab.assert_token(f.label),
                Polarity::Negative => self.vocab.negate_token(f.label),
            });
        }
        tokens.push(Vocabulary::EOS);
        let gt_text = render_report(&facts, &self.labels, derive_seed(self.cfg.seed, prompt_id));
        StudyRecord {
            prompt_id,
            ctx: ContextVec::new(ctx),
            z_star: GroundTruth::new(z),
            gt_report: TokenSeq::new(tokens, true),
            gt_text,
        }
    }

    /// Draw one study from the profile.
    pub fn sample_study<R: Rng>(&self, prompt_id: u64, rng: &mut R) -> StudyRecord {
        let z = self.sample_bits(rng, None);
        self.build_study(prompt_id, z, rng)
    }

    /// Deterministic dataset of `n` studies under the generator seed, with
    /// optional rare-label balancing.
    ///
    /// Balancing replaces records from the end of the pool (skipping any
    /// that are already rare-positive) with studies forced positive for the
    /// under-represented label, keeping the count at exactly `n`.
    pub fn make_dataset(&self, n: usize) -> Result<Vec<StudyRecord>> {
        self.make_dataset_with(n, self.cfg.seed, self.cfg.balance_min_positive)
    }

    /// Like [`make_dataset`](Self::make_dataset) but drawing the studies
    /// from an explicit stream seed. The label embedding stays tied to the
    /// generator seed, so pools drawn with different stream seeds describe
    /// the same underlying environment — that is what makes a held-out
    /// pool comparable to the training pool.
    pub fn make_dataset_with(
        &self,
        n: usize,
        stream_seed: u64,
        balance_min_positive: usize,
    ) -> Result<Vec<StudyRecord>> {
        if n == 0 {
            return Err(Error::Config("dataset size must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
        let mut records: Vec<StudyRecord> =
            (0..n).map(|i| self.sample_study(i as u64, &mut rng)).collect();
        if balance_min_positive > 0 && !self.profile.rare_labels.is_empty() {
            // Feasibility clamp: leave room for every protected label plus
            // a majority of unforced records.
            let cap = n / (self.profile.rare_labels.len() + 1);
            for &rare in &self.profile.rare_labels {
                let target = balance_min_positive.min(cap);
                let mut count = records.iter().filter(|r| r.z_star.labels[rare]).count();
                let mut cursor = n;
                while count < target && cursor > 0 {
                    cursor -= 1;
                    let replaceable = !self
                        .profile
                        .rare_labels
                        .iter()
                        .any(|&l| records[cursor].z_star.labels[l]);
                    if replaceable {
                        let z = self.sample_bits(&mut rng, Some(rare));
                        records[cursor] = self.build_study(records[cursor].prompt_id, z, &mut rng);
                        count += 1;
                    }
                }
                if count < target {
                    return Err(Error::Config(format!(
                        "cannot balance label {rare} to {target} positives in {n} records",
                    )));
                }
            }
        }
        Ok(records)
    }
}

/// On-disk corpus line.
#[derive(Debug, Serialize, Deserialize)]
struct CorpusLine {
    prompt_id: u64,
    context: Vec<f64>,
    labels: Vec<u8>,
    report: String,
}

/// Write studies as UTF-8 line-delimited JSON records.
pub fn save_corpus(path: &std::path::Path, records: &[StudyRecord]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        let line = CorpusLine {
            prompt_id: r.prompt_id,
            context: r.ctx.values.clone(),
            labels: r.z_star.labels.iter().map(|&b| u8::from(b)).collect(),
            report: r.gt_text.clone(),
        };
        serde_json::to_writer(&mut out, &line)
            .map_err(|e| Error::Input(format!("serialize record {}: {e}", r.prompt_id)))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Load a corpus, re-tokenizing each report through the fact extractor.
///
/// Malformed lines are rejected with their line number; a labels vector of
/// the wrong length is a parse error, a context dimension that differs
/// between records is a configuration error.
pub fn load_corpus(path: &std::path::Path, labels: &LabelSet) -> Result<Vec<StudyRecord>> {
    let text = std::fs::read_to_string(path)?;
    let vocab = Vocabulary::new(labels.len());
    let mut records = Vec::new();
    let mut ctx_dim: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let line: CorpusLine = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if line.labels.len() != labels.len() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("labels vector has length {}, expected {}", line.labels.len(), labels.len()),
            });
        }
        if line.labels.iter().any(|&b| b > 1) {
            return Err(Error::Parse { line: i + 1, msg: "labels must be 0/1".into() });
        }
        match ctx_dim {
            None => ctx_dim = Some(line.context.len()),
            Some(d) if d != line.context.len() => {
                return Err(Error::Config(format!(
                    "context dimension mismatch at line {}: {} vs {}",
                    i + 1,
                    line.context.len(),
                    d
                )));
            }
            _ => {}
        }
        let extraction = extract_facts(&line.report, labels);
        let mut tokens: Vec<usize> = extraction
            .facts
            .iter()
            .map(|f| match f.polarity {
                Polarity::Positive => vocab.assert_token(f.label),
                Polarity::Negative => vocab.negate_token(f.label),
            })
            .collect();
        tokens.push(Vocabulary::EOS);
        records.push(StudyRecord {
            prompt_id: line.prompt_id,
            ctx: ContextVec::new(line.context),
            z_star: GroundTruth::new(line.labels.iter().map(|&b| b == 1).collect()),
            gt_report: TokenSeq::new(tokens, true),
            gt_text: line.report,
        });
    }
    Ok(records)
}
