use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use orapo::config::build_config;
use orapo::env::{load_corpus, save_corpus, PrevalenceProfile, StudyGenerator};
use orapo::facts::{score_report, LabelSet, RewardConfig};
use orapo::metrics::zero_reward_fraction;
use orapo::trainer::{self, Algorithm, RunConfig};
use orapo::{Error, Result};

/// Desk-scale RL lab: GRPO / OraPO training with the FactS reward on a
/// synthetic report-generation environment.
#[derive(Parser)]
#[command(name = "orapo", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write telemetry, metrics, and checkpoints.
    Train {
        /// Run configuration file (key = value lines).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Inline overrides, e.g. --set steps=300 (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory for telemetry.csv, prompt_telemetry.csv,
        /// metrics.csv, and checkpoints/.
        #[arg(long, default_value = "runs/run")]
        out: PathBuf,
        /// Training corpus (JSONL); generated from the environment config
        /// when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Label panel file, one label per line (default: built-in 14).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Prevalence table (label<TAB>probability).
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Evaluate saved policy parameters on a corpus.
    Eval {
        /// Policy parameter file (.params).
        #[arg(long)]
        params: PathBuf,
        /// Evaluation corpus (JSONL).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Greedy decode length cap.
        #[arg(long, default_value_t = 12)]
        max_len: usize,
        /// Optional metrics CSV to write.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic study corpus.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of studies.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        profile: Option<PathBuf>,
    },
    /// Score line-delimited {report_text, z_star} records with FactS.
    Score {
        /// Input JSONL file.
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Output JSONL file ("-" for stdout).
        #[arg(long, default_value = "-")]
        output: String,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Recall weight beta.
        #[arg(long, default_value_t = 2.0)]
        beta: f64,
        /// Stability constant xi.
        #[arg(long, default_value_t = 1e-6)]
        xi: f64,
    },
    /// Paired GRPO-vs-OraPO runs over a seed list.
    Compare {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides applied to both runs.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Overrides applied only to run A (default algorithm=orapo).
        #[arg(long = "set-a", value_name = "KEY=VALUE")]
        set_a: Vec<String>,
        /// Overrides applied only to run B (default algorithm=grpo).
        #[arg(long = "set-b", value_name = "KEY=VALUE")]
        set_b: Vec<String>,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
        #[arg(long, default_value = "runs/compare")]
        out: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        profile: Option<PathBuf>,
    },
}

fn load_labels(path: &Option<PathBuf>) -> Result<LabelSet> {
    match path {
        Some(p) => LabelSet::from_file(p),
        None => Ok(LabelSet::default()),
    }
}

fn load_profile(path: &Option<PathBuf>, labels: &LabelSet) -> Result<PrevalenceProfile> {
    let profile = match path {
        Some(p) => PrevalenceProfile::from_file(p, labels)?,
        None => PrevalenceProfile::default(),
    };
    profile.validate(labels.len())?;
    Ok(profile)
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| Error::Config(format!("bad seed {s:?}: {e}")))
        })
        .collect()
}

fn cmd_train(
    config: Option<PathBuf>,
    set: Vec<String>,
    out: PathBuf,
    data: Option<PathBuf>,
    labels_path: Option<PathBuf>,
    profile_path: Option<PathBuf>,
) -> Result<()> {
    let cfg = build_config(config.as_deref(), &set)?;
    let labels = load_labels(&labels_path)?;
    let profile = load_profile(&profile_path, &labels)?;
    let (generated_train, eval_set) = trainer::prepare_pools(&cfg, &labels, &profile)?;
    let dataset = match &data {
        Some(path) => load_corpus(path, &labels)?,
        None => generated_train,
    };
    println!(
        "training {:?} for {} steps on {} studies ({} held out)",
        cfg.algorithm,
        cfg.steps,
        dataset.len(),
        eval_set.len()
    );
    let output = trainer::train(&cfg, &labels, &dataset, &eval_set, Some(&out))?;
    let last = output
        .telemetry
        .checkpoints
        .last()
        .expect("at least one checkpoint");
    println!(
        "done: macro P/R/F1 = {:.4}/{:.4}/{:.4}, cumulative zero-reward fraction {:.4}",
        last.macro_precision,
        last.macro_recall,
        last.macro_f1,
        zero_reward_fraction(&output.telemetry, cfg.steps)
    );
    println!("outputs in {}", out.display());
    Ok(())
}

fn cmd_eval(
    params: PathBuf,
    data: PathBuf,
    labels_path: Option<PathBuf>,
    max_len: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let labels = load_labels(&labels_path)?;
    let policy = orapo::io::load_params(&params)?;
    let eval_set = load_corpus(&data, &labels)?;
    if eval_set.is_empty() {
        return Err(Error::Config("evaluation corpus is empty".into()));
    }
    let metrics = trainer::evaluate(&policy, &eval_set, &labels, &RewardConfig::default(), max_len, 0)?;
    println!(
        "macro precision {:.4}  recall {:.4}  F1 {:.4}",
        metrics.macro_precision, metrics.macro_recall, metrics.macro_f1
    );
    for (name, f1) in labels.names().iter().zip(&metrics.per_label_f1) {
        println!("  f1[{name}] = {f1:.4}");
    }
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Input(e.to_string()))?;
        let mut header = vec!["step".to_string(), "macro_precision".into(), "macro_recall".into(), "macro_f1".into()];
        header.extend(labels.names().iter().map(|n| format!("f1_{}", n.replace(' ', "_"))));
        w.write_record(header).map_err(|e| Error::Input(e.to_string()))?;
        let mut rec = vec![
            metrics.step.to_string(),
            metrics.macro_precision.to_string(),
            metrics.macro_recall.to_string(),
            metrics.macro_f1.to_string(),
        ];
        rec.extend(metrics.per_label_f1.iter().map(|f| f.to_string()));
        w.write_record(rec).map_err(|e| Error::Input(e.to_string()))?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_gen_data(
    out: PathBuf,
    n: usize,
    config: Option<PathBuf>,
    set: Vec<String>,
    labels_path: Option<PathBuf>,
    profile_path: Option<PathBuf>,
) -> Result<()> {
    let cfg = build_config(config.as_deref(), &set)?;
    let labels = load_labels(&labels_path)?;
    let profile = load_profile(&profile_path, &labels)?;
    let generator = StudyGenerator::new(labels, profile, cfg.env.clone())?;
    let records = generator.make_dataset(n)?;
    save_corpus(&out, &records)?;
    println!("wrote {} studies to {}", records.len(), out.display());
    Ok(())
}

#[derive(serde::Deserialize)]
struct ScoreIn {
    report_text: String,
    z_star: Vec<u8>,
}

#[derive(serde::Serialize)]
struct ScoreFact {
    label: String,
    polarity: orapo::facts::Polarity,
    source_sentence: usize,
}

#[derive(serde::Serialize)]
struct ScoreOut {
    reward: f64,
    z_hat: Vec<u8>,
    facts: Vec<ScoreFact>,
    skipped_sentences: usize,
}

fn cmd_score(
    input: PathBuf,
    output: String,
    labels_path: Option<PathBuf>,
    beta: f64,
    xi: f64,
) -> Result<()> {
    let labels = load_labels(&labels_path)?;
    let cfg = RewardConfig { beta, xi, ..RewardConfig::default() };
    cfg.validate()?;
    let text = std::fs::read_to_string(&input)?;
    let mut lines_out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let record: ScoreIn = serde_json::from_str(raw).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        if record.z_star.len() != labels.len() {
            return Err(Error::Parse {
                line: i + 1,
                msg: format!("z_star has length {}, expected {}", record.z_star.len(), labels.len()),
            });
        }
        let gt = orapo::facts::GroundTruth::new(record.z_star.iter().map(|&b| b == 1).collect());
        let scored = score_report(&record.report_text, &gt, &labels, &cfg);
        let out = ScoreOut {
            reward: scored.reward,
            z_hat: scored.outcome.z_hat.iter().map(|&b| u8::from(b)).collect(),
            facts: scored
                .extraction
                .facts
                .iter()
                .map(|f| ScoreFact {
                    label: labels.name(f.label).to_string(),
                    polarity: f.polarity,
                    source_sentence: f.source_sentence,
                })
                .collect(),
            skipped_sentences: scored.extraction.skipped_sentences,
        };
        lines_out.push(serde_json::to_string(&out).map_err(|e| Error::Input(e.to_string()))?);
    }
    let body = lines_out.join("\n") + if lines_out.is_empty() { "" } else { "\n" };
    if output == "-" {
        print!("{body}");
    } else {
        std::fs::write(Path::new(&output), body)?;
    }
    Ok(())
}

fn cmd_compare(
    config: Option<PathBuf>,
    set: Vec<String>,
    set_a: Vec<String>,
    set_b: Vec<String>,
    seeds: String,
    out: PathBuf,
    labels_path: Option<PathBuf>,
    profile_path: Option<PathBuf>,
) -> Result<()> {
    let seeds = parse_seeds(&seeds)?;
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    let labels = load_labels(&labels_path)?;
    let profile = load_profile(&profile_path, &labels)?;
    let base = build_config(config.as_deref(), &set)?;
    let mut cfg_a = base.clone();
    cfg_a.algorithm = Algorithm::Orapo;
    for item in &set_a {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        orapo::config::apply_setting(&mut cfg_a, k, v)?;
    }
    let mut cfg_b = base;
    cfg_b.algorithm = Algorithm::Grpo;
    for item in &set_b {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        orapo::config::apply_setting(&mut cfg_b, k, v)?;
    }
    let name = |cfg: &RunConfig| match cfg.algorithm {
        Algorithm::Orapo => "orapo",
        Algorithm::Grpo => "grpo",
    };
    let (name_a, name_b) = (name(&cfg_a), name(&cfg_b));
    let report = trainer::compare(&cfg_a, name_a, &cfg_b, name_b, &seeds, &labels, &profile)?;
    std::fs::create_dir_all(&out)?;
    let csv_path = out.join("compare.csv");
    report.write_csv(&csv_path)?;
    for run in [name_a, name_b] {
        let mut zero_sum = 0.0;
        let mut f1_sum = 0.0;
        let mut rare_sum = 0.0;
        for &seed in &seeds {
            if let Some(row) = report.final_row(run, seed) {
                zero_sum += row.cum_zero_fraction;
                f1_sum += row.macro_f1;
                rare_sum += row.rare_f1;
            }
        }
        let n = seeds.len() as f64;
        println!(
            "{run}: mean final zero-fraction {:.4}, macro F1 {:.4}, rare-class F1 {:.4}",
            zero_sum / n,
            f1_sum / n,
            rare_sum / n
        );
    }
    println!("curves written to {}", csv_path.display());
    Ok(())
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, set, out, data, labels, profile } => {
            cmd_train(config, set, out, data, labels, profile)
        }
        Command::Eval { params, data, labels, max_len, out } => {
            cmd_eval(params, data, labels, max_len, out)
        }
        Command::GenData { out, n, config, set, labels, profile } => {
            cmd_gen_data(out, n, config, set, labels, profile)
        }
        Command::Score { input, output, labels, beta, xi } => {
            cmd_score(input, output, labels, beta, xi)
        }
        Command::Compare { config, set, set_a, set_b, seeds, out, labels, profile } => {
            cmd_compare(config, set, set_a, set_b, seeds, out, labels, profile)
        }
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
