//! Experiment orchestration: the training loop, greedy evaluation,
//! checkpointing, and paired GRPO-vs-OraPO comparison runs.
//!
//! Per optimizer step: draw B prompts (shuffled epochs over the pool),
//! snapshot the behaviour policy, sample K rollouts per prompt, score them,
//! update the per-prompt zero-reward EMA and mixing weight (forced to zero
//! in pure-GRPO mode), take `inner_epochs` optimizer steps on the mixed
//! objective, and append telemetry. Checkpoints carry the binary policy
//! parameters, the ZRR state, and the evaluation row; reloading one
//! reproduces its metrics exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dpo::DpoConfig;
use crate::env::{tokens_to_facts, EnvConfig, PrevalenceProfile, StudyGenerator, StudyRecord};
use crate::facts::{render_report, score_report, LabelSet, RewardConfig};
use crate::grpo::GrpoConfig;
use crate::metrics::{CheckpointMetrics, ConfusionTally, RunTelemetry, StepRecord};
use crate::mix::{orapo_batch_loss, raw_zrr, MixSchedule, PromptEval, ZrrGranularity, ZrrState};
use crate::policy::{greedy_decode, sample_group, PolicyParams, SamplerConfig, TokenSeq, Vocabulary};
use crate::{io, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Grpo,
    Orapo,
}

/// Reward used for rollouts; the binary exact-match reward exists for
/// ablation runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    Facts,
    ExactMatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate: 1e-2, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Full run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub sampler: SamplerConfig,
    pub grpo: GrpoConfig,
    pub dpo: DpoConfig,
    pub mix: MixSchedule,
    pub reward: RewardConfig,
    pub env: EnvConfig,
    pub optim: OptimConfig,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub seed: u64,
    pub reward_kind: RewardKind,
    pub zrr_granularity: ZrrGranularity,
    /// Policy hidden width H.
    pub hidden_dim: usize,
    /// Scale of the random weight init.
    pub init_scale: f64,
    /// Initial EOS logit bias; large values start the policy on empty
    /// reports, the sparse-reward regime of interest.
    pub init_eos_logit: f64,
    /// Training pool size when the dataset is generated.
    pub pool_size: usize,
    /// Held-out evaluation pool size.
    pub eval_size: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Orapo,
            sampler: SamplerConfig::default(),
            grpo: GrpoConfig::default(),
            dpo: DpoConfig::default(),
            mix: MixSchedule::default(),
            reward: RewardConfig::default(),
            env: EnvConfig::default(),
            optim: OptimConfig::default(),
            steps: 600,
            batch_size: 16,
            eval_every: 25,
            seed: 42,
            reward_kind: RewardKind::Facts,
            zrr_granularity: ZrrGranularity::PerPrompt,
            hidden_dim: 24,
            init_scale: 0.05,
            init_eos_logit: 6.0,
            pool_size: 1000,
            eval_size: 200,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.grpo.validate()?;
        self.dpo.validate()?;
        self.mix.validate()?;
        self.reward.validate()?;
        self.env.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be at least 1".into()));
        }
        if self.pool_size == 0 || self.eval_size == 0 {
            return Err(Error::Config("pool_size and eval_size must be at least 1".into()));
        }
        if self.optim.learning_rate < 0.0 {
            return Err(Error::Config("learning_rate must be nonnegative".into()));
        }
        Ok(())
    }
}

/// SGD or bias-corrected Adam over the flat parameter vector.
struct Optimizer {
    cfg: OptimConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Optimizer {
    fn new(cfg: OptimConfig, param_count: usize) -> Self {
        Self { cfg, m: vec![0.0; param_count], v: vec![0.0; param_count], t: 0 }
    }

    fn step(&mut self, params: &mut PolicyParams, grad: &PolicyParams) {
        match self.cfg.kind {
            OptimizerKind::Sgd => params.axpy(-self.cfg.learning_rate, grad),
            OptimizerKind::Adam => {
                self.t += 1;
                let g = grad.to_flat();
                let mut x = params.to_flat();
                let b1 = self.cfg.beta1;
                let b2 = self.cfg.beta2;
                let bc1 = 1.0 - b1.powi(self.t as i32);
                let bc2 = 1.0 - b2.powi(self.t as i32);
                for i in 0..x.len() {
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    x[i] -= self.cfg.learning_rate * mhat / (vhat.sqrt() + self.cfg.eps);
                }
                *params = PolicyParams::from_flat(
                    params.ctx_dim,
                    params.hidden_dim,
                    params.vocab_size,
                    &x,
                )
                .expect("shape preserved");
            }
        }
    }
}

/// A saved training state at one step.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub params: PolicyParams,
    pub zrr: ZrrState,
    pub metrics: CheckpointMetrics,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointState {
    step: u64,
    zrr: ZrrState,
    macro_precision: f64,
    macro_recall: f64,
    macro_f1: f64,
    per_label_f1: Vec<f64>,
}

pub fn save_checkpoint(dir: &Path, checkpoint: &Checkpoint) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("step_{:06}", checkpoint.step);
    io::save_params(&dir.join(format!("{stem}.params")), &checkpoint.params)?;
    let state = CheckpointState {
        step: checkpoint.step,
        zrr: checkpoint.zrr.clone(),
        macro_precision: checkpoint.metrics.macro_precision,
        macro_recall: checkpoint.metrics.macro_recall,
        macro_f1: checkpoint.metrics.macro_f1,
        per_label_f1: checkpoint.metrics.per_label_f1.clone(),
    };
    let json = serde_json::to_string_pretty(&state)
        .map_err(|e| Error::Input(format!("serialize checkpoint state: {e}")))?;
    std::fs::write(dir.join(format!("{stem}.state.json")), json)?;
    Ok(dir.join(stem))
}

pub fn load_checkpoint(dir: &Path, step: u64) -> Result<Checkpoint> {
    let stem = format!("step_{step:06}");
    let params = io::load_params(&dir.join(format!("{stem}.params")))?;
    let text = std::fs::read_to_string(dir.join(format!("{stem}.state.json")))?;
    let state: CheckpointState =
        serde_json::from_str(&text).map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    Ok(Checkpoint {
        step: state.step,
        params,
        zrr: state.zrr,
        metrics: CheckpointMetrics {
            step: state.step,
            macro_precision: state.macro_precision,
            macro_recall: state.macro_recall,
            macro_f1: state.macro_f1,
            per_label_f1: state.per_label_f1,
        },
    })
}

/// Result of a full training run.
pub struct TrainOutput {
    pub telemetry: RunTelemetry,
    pub params: PolicyParams,
    pub reference: PolicyParams,
    pub checkpoints: Vec<Checkpoint>,
}

/// Deterministic style seed for rendering a rollout as report text.
fn rollout_style_seed(run_seed: u64, step: u64, prompt_id: u64, j: usize) -> u64 {
    crate::env::derive_seed(
        run_seed ^ step.rotate_left(17),
        prompt_id.wrapping_mul(31).wrapping_add(j as u64),
    )
}

fn score_rollouts(
    cfg: &RunConfig,
    vocab: &Vocabulary,
    labels: &LabelSet,
    study: &StudyRecord,
    group: &crate::policy::RolloutGroup,
    step: u64,
) -> Vec<f64> {
    group
        .sequences
        .iter()
        .enumerate()
        .map(|(j, seq)| match cfg.reward_kind {
            RewardKind::ExactMatch => f64::from(*seq == study.gt_report),
            RewardKind::Facts => {
                let facts = tokens_to_facts(vocab, seq);
                let text = render_report(
                    &facts,
                    labels,
                    rollout_style_seed(cfg.seed, step, study.prompt_id, j),
                );
                score_report(&text, &study.z_star, labels, &cfg.reward).reward
            }
        })
        .collect()
}

struct CsvSinks {
    steps: csv::Writer<std::fs::File>,
    prompts: csv::Writer<std::fs::File>,
    metrics: csv::Writer<std::fs::File>,
}

pub const STEP_CSV_HEADER: [&str; 7] =
    ["step", "zero_reward_batch", "mean_weight", "mean_reward", "total_loss", "grpo_loss", "dpo_loss"];
pub const PROMPT_CSV_HEADER: [&str; 8] =
    ["step", "prompt_id", "z", "ema_z", "w", "mean_reward", "grpo_loss", "dpo_loss"];

fn metrics_csv_header(labels: &LabelSet) -> Vec<String> {
    let mut header = vec![
        "step".to_string(),
        "macro_precision".into(),
        "macro_recall".into(),
        "macro_f1".into(),
    ];
    for name in labels.names() {
        header.push(format!("f1_{}", name.replace(' ', "_")));
    }
    header
}

impl CsvSinks {
    fn create(dir: &Path, labels: &LabelSet) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut steps = csv::Writer::from_path(dir.join("telemetry.csv"))
            .map_err(|e| Error::Input(e.to_string()))?;
        steps.write_record(STEP_CSV_HEADER).map_err(|e| Error::Input(e.to_string()))?;
        let mut prompts = csv::Writer::from_path(dir.join("prompt_telemetry.csv"))
            .map_err(|e| Error::Input(e.to_string()))?;
        prompts.write_record(PROMPT_CSV_HEADER).map_err(|e| Error::Input(e.to_string()))?;
        let mut metrics = csv::Writer::from_path(dir.join("metrics.csv"))
            .map_err(|e| Error::Input(e.to_string()))?;
        metrics
            .write_record(metrics_csv_header(labels))
            .map_err(|e| Error::Input(e.to_string()))?;
        Ok(Self { steps, prompts, metrics })
    }

    fn write_step(&mut self, rec: &StepRecord) -> Result<()> {
        self.steps
            .write_record([
                rec.step.to_string(),
                u8::from(rec.zero_reward_batch).to_string(),
                rec.mean_weight.to_string(),
                rec.mean_reward.to_string(),
                rec.total_loss.to_string(),
                rec.mean_grpo_loss.to_string(),
                rec.mean_dpo_loss.to_string(),
            ])
            .map_err(|e| Error::Input(e.to_string()))
    }

    fn write_prompt(&mut self, step: u64, row: &crate::mix::PromptTelemetry) -> Result<()> {
        self.prompts
            .write_record([
                step.to_string(),
                row.prompt_id.to_string(),
                row.raw_zrr.to_string(),
                row.ema_zrr.to_string(),
                row.weight.to_string(),
                row.mean_reward.to_string(),
                row.grpo_loss.to_string(),
                row.dpo_loss.to_string(),
            ])
            .map_err(|e| Error::Input(e.to_string()))
    }

    fn write_metrics(&mut self, m: &CheckpointMetrics) -> Result<()> {
        let mut rec = vec![
            m.step.to_string(),
            m.macro_precision.to_string(),
            m.macro_recall.to_string(),
            m.macro_f1.to_string(),
        ];
        rec.extend(m.per_label_f1.iter().map(|f| f.to_string()));
        self.metrics.write_record(rec).map_err(|e| Error::Input(e.to_string()))
    }

    fn flush(&mut self) -> Result<()> {
        self.steps.flush()?;
        self.prompts.flush()?;
        self.metrics.flush()?;
        Ok(())
    }
}

fn validate_dataset(cfg: &RunConfig, labels: &LabelSet, dataset: &[StudyRecord]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset must not be empty".into()));
    }
    for s in dataset {
        if s.ctx.dim() != cfg.env.ctx_dim {
            return Err(Error::Config(format!(
                "study {} has context dim {}, expected {}",
                s.prompt_id,
                s.ctx.dim(),
                cfg.env.ctx_dim
            )));
        }
        if s.z_star.len() != labels.len() {
            return Err(Error::Config(format!(
                "study {} has {} labels, expected {}",
                s.prompt_id,
                s.z_star.len(),
                labels.len()
            )));
        }
        if s.gt_report.is_empty() {
            return Err(Error::Config(format!("study {} has an empty report", s.prompt_id)));
        }
    }
    Ok(())
}

fn abort_dump(step: u64, items: &[PromptEval]) -> String {
    let mut out = format!("non-finite loss at step {step}; offending batch:\n");
    for item in items {
        let _ = writeln!(
            out,
            "  prompt {} w={} z={} rewards={:?} logp_old={:?} logp_new={:?}",
            item.prompt_id, item.weight, item.raw_zrr, item.group.rewards, item.group.logp_old,
            item.group.logp_new
        );
    }
    out
}

/// Generate the training and held-out pools for a run configuration.
///
/// The held-out pool uses a derived seed and proportionally scaled
/// balancing so evaluation sees every rare label.
pub fn prepare_pools(
    cfg: &RunConfig,
    labels: &LabelSet,
    profile: &PrevalenceProfile,
) -> Result<(Vec<StudyRecord>, Vec<StudyRecord>)> {
    let generator = StudyGenerator::new(labels.clone(), profile.clone(), cfg.env.clone())?;
    let train = generator.make_dataset(cfg.pool_size)?;
    // Held-out pool: fresh stream seed, same environment (in particular the
    // same label embedding), balancing scaled to the pool size.
    let eval_balance = if cfg.env.balance_min_positive > 0 {
        let scaled = (cfg.env.balance_min_positive as f64 * cfg.eval_size as f64
            / cfg.pool_size as f64)
            .ceil() as usize;
        scaled.clamp(1, cfg.eval_size)
    } else {
        0
    };
    let eval = generator.make_dataset_with(
        cfg.eval_size,
        crate::env::derive_seed(cfg.env.seed, 0x4556414c), // "EVAL"
        eval_balance,
    )?;
    Ok((train, eval))
}

/// Score a set of already-decoded reports against their studies.
pub fn evaluate_decoded(
    decoded: &[TokenSeq],
    eval_set: &[StudyRecord],
    labels: &LabelSet,
    reward_cfg: &RewardConfig,
    step: u64,
) -> Result<CheckpointMetrics> {
    if decoded.len() != eval_set.len() {
        return Err(Error::Config("decoded report count does not match eval set".into()));
    }
    let vocab = Vocabulary::new(labels.len());
    let mut tally = ConfusionTally::new(labels.len());
    for (seq, study) in decoded.iter().zip(eval_set) {
        let facts = tokens_to_facts(&vocab, seq);
        let text = render_report(&facts, labels, crate::env::derive_seed(study.prompt_id, 0xE7A1));
        let scored = score_report(&text, &study.z_star, labels, reward_cfg);
        tally.record(&scored.outcome.z_hat, &study.z_star.labels)?;
    }
    let (macro_precision, macro_recall, macro_f1) = tally.macro_prf();
    Ok(CheckpointMetrics {
        step,
        macro_precision,
        macro_recall,
        macro_f1,
        per_label_f1: tally.per_label_f1(),
    })
}

/// Greedy-decode every study and score the resulting reports.
pub fn evaluate(
    params: &PolicyParams,
    eval_set: &[StudyRecord],
    labels: &LabelSet,
    reward_cfg: &RewardConfig,
    max_len: usize,
    step: u64,
) -> Result<CheckpointMetrics> {
    let vocab = Vocabulary::new(labels.len());
    if params.vocab_size != vocab.size() {
        return Err(Error::Config(format!(
            "policy vocab size {} does not match label panel ({} labels)",
            params.vocab_size,
            labels.len()
        )));
    }
    let mut decoded = Vec::with_capacity(eval_set.len());
    for study in eval_set {
        decoded.push(greedy_decode(params, &study.ctx, max_len)?);
    }
    evaluate_decoded(&decoded, eval_set, labels, reward_cfg, step)
}

/// Run the full training loop.
pub fn train(
    cfg: &RunConfig,
    labels: &LabelSet,
    dataset: &[StudyRecord],
    eval_set: &[StudyRecord],
    out_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    validate_dataset(cfg, labels, dataset)?;
    validate_dataset(cfg, labels, eval_set)?;
    let vocab = Vocabulary::new(labels.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = PolicyParams::init(
        cfg.env.ctx_dim,
        cfg.hidden_dim,
        vocab.size(),
        cfg.init_scale,
        cfg.init_eos_logit,
        &mut rng,
    );
    let reference = params.snapshot();
    let mut optimizer = Optimizer::new(cfg.optim.clone(), params.param_count());
    let mut zrr = ZrrState::new(cfg.zrr_granularity);
    let mut telemetry = RunTelemetry::default();
    let mut checkpoints: Vec<Checkpoint> = Vec::new();
    let mut sinks = match out_dir {
        Some(dir) => Some(CsvSinks::create(dir, labels)?),
        None => None,
    };

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = dataset.len();

    for step in 1..=cfg.steps {
        let old = params.snapshot();
        let mut items: Vec<PromptEval> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            if cursor >= order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let study = &dataset[order[cursor]];
            cursor += 1;
            let mut group = sample_group(&old, &study.ctx, &cfg.sampler, &mut rng)?;
            let rewards = score_rollouts(cfg, &vocab, labels, study, &group, step);
            group.set_rewards(rewards)?;
            let z = raw_zrr(&group.rewards, cfg.reward.zero_threshold);
            items.push(PromptEval {
                prompt_id: study.prompt_id,
                ctx: study.ctx.clone(),
                gt_report: study.gt_report.clone(),
                group,
                weight: 0.0,
                raw_zrr: z,
                ema_zrr: 0.0,
            });
        }
        match cfg.zrr_granularity {
            ZrrGranularity::PerPrompt => {
                for item in items.iter_mut() {
                    item.ema_zrr = zrr.update_ema(item.prompt_id, item.raw_zrr, cfg.mix.alpha);
                }
            }
            ZrrGranularity::PerBatch => {
                let all: Vec<f64> =
                    items.iter().flat_map(|i| i.group.rewards.iter().copied()).collect();
                let batch_z = raw_zrr(&all, cfg.reward.zero_threshold);
                let ema = zrr.update_ema(0, batch_z, cfg.mix.alpha);
                for item in items.iter_mut() {
                    item.ema_zrr = ema;
                }
            }
        }
        for item in items.iter_mut() {
            item.weight = match cfg.algorithm {
                Algorithm::Grpo => 0.0,
                Algorithm::Orapo => cfg.mix.weight(item.ema_zrr),
            };
        }
        zrr.advance_step();

        let mut final_loss = 0.0;
        let mut prompt_rows = Vec::new();
        for _ in 0..cfg.grpo.inner_epochs {
            let (loss, grad, rows) =
                orapo_batch_loss(&mut items, &params, &reference, &cfg.grpo, &cfg.dpo)?;
            if !loss.is_finite() {
                let dump = abort_dump(step, &items);
                if let Some(dir) = out_dir {
                    let _ = std::fs::write(dir.join("abort_dump.txt"), &dump);
                }
                return Err(Error::Abort(dump));
            }
            optimizer.step(&mut params, &grad);
            final_loss = loss;
            prompt_rows = rows;
        }

        let all_rewards: Vec<f64> =
            items.iter().flat_map(|i| i.group.rewards.iter().copied()).collect();
        let mean_reward = all_rewards.iter().sum::<f64>() / all_rewards.len() as f64;
        let record = StepRecord {
            step,
            zero_reward_batch: mean_reward <= cfg.reward.zero_threshold,
            mean_weight: items.iter().map(|i| i.weight).sum::<f64>() / items.len() as f64,
            mean_reward,
            total_loss: final_loss,
            mean_grpo_loss: prompt_rows.iter().map(|r| r.grpo_loss).sum::<f64>()
                / prompt_rows.len() as f64,
            mean_dpo_loss: prompt_rows.iter().map(|r| r.dpo_loss).sum::<f64>()
                / prompt_rows.len() as f64,
        };
        if let Some(sinks) = sinks.as_mut() {
            sinks.write_step(&record)?;
            for row in &prompt_rows {
                sinks.write_prompt(step, row)?;
            }
        }
        telemetry.steps.push(record);

        if step % cfg.eval_every == 0 || step == cfg.steps {
            let metrics =
                evaluate(&params, eval_set, labels, &cfg.reward, cfg.sampler.max_len, step)?;
            if let Some(sinks) = sinks.as_mut() {
                sinks.write_metrics(&metrics)?;
            }
            let checkpoint = Checkpoint {
                step,
                params: params.snapshot(),
                zrr: zrr.clone(),
                metrics: metrics.clone(),
            };
            if let Some(dir) = out_dir {
                save_checkpoint(&dir.join("checkpoints"), &checkpoint)?;
            }
            telemetry.checkpoints.push(metrics);
            checkpoints.push(checkpoint);
        }
    }
    if let Some(sinks) = sinks.as_mut() {
        sinks.flush()?;
    }
    Ok(TrainOutput { telemetry, params, reference, checkpoints })
}

/// One checkpoint row of a comparison run.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub run: String,
    pub seed: u64,
    pub step: u64,
    pub cum_zero_fraction: f64,
    pub macro_f1: f64,
    pub rare_f1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CompareReport {
    pub rows: Vec<CompareRow>,
}

pub const COMPARE_CSV_HEADER: [&str; 6] =
    ["run", "seed", "step", "cum_zero_fraction", "macro_f1", "rare_f1"];

impl CompareReport {
    pub fn rows_for(&self, run: &str, seed: u64) -> Vec<&CompareRow> {
        self.rows.iter().filter(|r| r.run == run && r.seed == seed).collect()
    }

    pub fn final_row(&self, run: &str, seed: u64) -> Option<&CompareRow> {
        self.rows_for(run, seed).into_iter().max_by_key(|r| r.step)
    }

    /// Cumulative zero-reward fraction at the latest checkpoint at or
    /// before `step`.
    pub fn zero_fraction_at(&self, run: &str, seed: u64, step: u64) -> Option<f64> {
        self.rows_for(run, seed)
            .into_iter()
            .filter(|r| r.step <= step)
            .max_by_key(|r| r.step)
            .map(|r| r.cum_zero_fraction)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Input(e.to_string()))?;
        w.write_record(COMPARE_CSV_HEADER).map_err(|e| Error::Input(e.to_string()))?;
        for r in &self.rows {
            w.write_record([
                r.run.clone(),
                r.seed.to_string(),
                r.step.to_string(),
                r.cum_zero_fraction.to_string(),
                r.macro_f1.to_string(),
                r.rare_f1.to_string(),
            ])
            .map_err(|e| Error::Input(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_rows(
    name: &str,
    seed: u64,
    out: &TrainOutput,
    rare_labels: &[usize],
) -> Vec<CompareRow> {
    out.telemetry
        .checkpoints
        .iter()
        .map(|m| CompareRow {
            run: name.to_string(),
            seed,
            step: m.step,
            cum_zero_fraction: crate::metrics::zero_reward_fraction(&out.telemetry, m.step),
            macro_f1: m.macro_f1,
            rare_f1: RunTelemetry::rare_f1(m, rare_labels),
        })
        .collect()
}

/// Run two configurations over a seed list on identical per-seed datasets
/// (derived from the first configuration's environment) and collect
/// plot-ready curves.
pub fn compare(
    cfg_a: &RunConfig,
    name_a: &str,
    cfg_b: &RunConfig,
    name_b: &str,
    seeds: &[u64],
    labels: &LabelSet,
    profile: &PrevalenceProfile,
) -> Result<CompareReport> {
    let mut report = CompareReport::default();
    for &seed in seeds {
        let mut base = cfg_a.clone();
        base.seed = seed;
        base.env.seed = crate::env::derive_seed(cfg_a.env.seed, seed);
        let (dataset, eval_set) = prepare_pools(&base, labels, profile)?;
        for (cfg, name) in [(cfg_a, name_a), (cfg_b, name_b)] {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            run_cfg.env.seed = base.env.seed;
            let out = train(&run_cfg, labels, &dataset, &eval_set, None)?;
            report.rows.extend(run_rows(name, seed, &out, &profile.rare_labels));
        }
    }
    Ok(report)
}
