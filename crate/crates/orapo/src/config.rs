//! Plain-text run configuration: `key = value` lines with `#` comments,
//! applied over the defaults; CLI `--set key=value` overrides win last.

use std::path::Path;

use crate::dpo::{DpoVariant, NegativesPolicy};
use crate::grpo::GrpoVariant;
use crate::mix::ZrrGranularity;
use crate::trainer::{Algorithm, OptimizerKind, RewardKind, RunConfig};
use crate::{Error, Result};

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

/// Apply one `key = value` setting to the configuration.
pub fn apply_setting(cfg: &mut RunConfig, key: &str, value: &str) -> Result<()> {
    let v = value.trim();
    match key.trim() {
        "algorithm" => {
            cfg.algorithm = match v {
                "grpo" => Algorithm::Grpo,
                "orapo" => Algorithm::Orapo,
                _ => return Err(Error::Config(format!("unknown algorithm {v:?}"))),
            }
        }
        "steps" => cfg.steps = parse(key, v)?,
        "batch_size" => cfg.batch_size = parse(key, v)?,
        "eval_every" => cfg.eval_every = parse(key, v)?,
        "seed" => cfg.seed = parse(key, v)?,
        "reward_kind" => {
            cfg.reward_kind = match v {
                "facts" => RewardKind::Facts,
                "exact_match" => RewardKind::ExactMatch,
                _ => return Err(Error::Config(format!("unknown reward_kind {v:?}"))),
            }
        }
        "zrr_granularity" => {
            cfg.zrr_granularity = match v {
                "per_prompt" => ZrrGranularity::PerPrompt,
                "per_batch" => ZrrGranularity::PerBatch,
                _ => return Err(Error::Config(format!("unknown zrr_granularity {v:?}"))),
            }
        }
        "hidden_dim" => cfg.hidden_dim = parse(key, v)?,
        "init_scale" => cfg.init_scale = parse(key, v)?,
        "init_eos_logit" => cfg.init_eos_logit = parse(key, v)?,
        "pool_size" => cfg.pool_size = parse(key, v)?,
        "eval_size" => cfg.eval_size = parse(key, v)?,
        "optimizer.kind" => {
            cfg.optim.kind = match v {
                "sgd" => OptimizerKind::Sgd,
                "adam" => OptimizerKind::Adam,
                _ => return Err(Error::Config(format!("unknown optimizer {v:?}"))),
            }
        }
        "optimizer.learning_rate" => cfg.optim.learning_rate = parse(key, v)?,
        "optimizer.beta1" => cfg.optim.beta1 = parse(key, v)?,
        "optimizer.beta2" => cfg.optim.beta2 = parse(key, v)?,
        "optimizer.eps" => cfg.optim.eps = parse(key, v)?,
        "sampler.group_size" => cfg.sampler.group_size = parse(key, v)?,
        "sampler.max_len" => cfg.sampler.max_len = parse(key, v)?,
        "sampler.temperature" => cfg.sampler.temperature = parse(key, v)?,
        "sampler.seed" => cfg.sampler.seed = parse(key, v)?,
        "grpo.eps_var" => cfg.grpo.eps_var = parse(key, v)?,
        "grpo.eps_clip" => cfg.grpo.eps_clip = parse(key, v)?,
        "grpo.lambda_kl" => cfg.grpo.lambda_kl = parse(key, v)?,
        "grpo.inner_epochs" => cfg.grpo.inner_epochs = parse(key, v)?,
        "grpo.variant" => {
            cfg.grpo.variant = match v {
                "vanilla" => GrpoVariant::Vanilla,
                "dr_grpo" => GrpoVariant::DrGrpo,
                _ => return Err(Error::Config(format!("unknown grpo.variant {v:?}"))),
            }
        }
        "dpo.tau" => cfg.dpo.tau = parse(key, v)?,
        "dpo.zero_threshold" => cfg.dpo.zero_threshold = parse(key, v)?,
        "dpo.variant" => {
            cfg.dpo.variant = match v {
                "vanilla" => DpoVariant::Vanilla,
                "ln_dpo" => DpoVariant::LnDpo,
                _ => return Err(Error::Config(format!("unknown dpo.variant {v:?}"))),
            }
        }
        "dpo.negatives_policy" => {
            cfg.dpo.negatives_policy = match v {
                "all_rollouts" => NegativesPolicy::AllRollouts,
                "zero_reward_only" => NegativesPolicy::ZeroRewardOnly,
                _ => return Err(Error::Config(format!("unknown dpo.negatives_policy {v:?}"))),
            }
        }
        "mix.alpha" => cfg.mix.alpha = parse(key, v)?,
        "mix.w_min" => cfg.mix.w_min = parse(key, v)?,
        "mix.w_max" => cfg.mix.w_max = parse(key, v)?,
        "mix.gamma" => cfg.mix.gamma = parse(key, v)?,
        "reward.beta" => cfg.reward.beta = parse(key, v)?,
        "reward.xi" => cfg.reward.xi = parse(key, v)?,
        "reward.zero_threshold" => cfg.reward.zero_threshold = parse(key, v)?,
        "env.signal_strength" => cfg.env.signal_strength = parse(key, v)?,
        "env.noise_std" => cfg.env.noise_std = parse(key, v)?,
        "env.negatives_mentioned" => cfg.env.negatives_mentioned = parse(key, v)?,
        "env.ctx_dim" => cfg.env.ctx_dim = parse(key, v)?,
        "env.seed" => cfg.env.seed = parse(key, v)?,
        "env.require_positive" => cfg.env.require_positive = parse_bool(key, v)?,
        "env.balance_min_positive" => cfg.env.balance_min_positive = parse(key, v)?,
        other => return Err(Error::Config(format!("unknown configuration key {other:?}"))),
    }
    Ok(())
}

/// Apply a whole `key = value` document.
pub fn apply_config_text(cfg: &mut RunConfig, text: &str) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(Error::Parse {
            line: i + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        apply_setting(cfg, key, value).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
    }
    Ok(())
}

/// Defaults, then the file (if any), then each override in order.
pub fn build_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)?;
        apply_config_text(&mut cfg, &text)?;
    }
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| {
            Error::Config(format!("override {item:?} is not of the form key=value"))
        })?;
        apply_setting(&mut cfg, key, value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\nalgorithm = grpo\nsteps = 50\nmix.w_max = 0.2\nenv.require_positive = true\n",
        )
        .unwrap();
        let cfg = build_config(Some(&path), &["steps=75".into(), "grpo.variant=vanilla".into()])
            .unwrap();
        assert_eq!(cfg.algorithm, Algorithm::Grpo);
        assert_eq!(cfg.steps, 75);
        assert_eq!(cfg.mix.w_max, 0.2);
        assert_eq!(cfg.grpo.variant, GrpoVariant::Vanilla);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(apply_setting(&mut cfg, "bogus", "1").is_err());
        assert!(apply_setting(&mut cfg, "steps", "many").is_err());
        assert!(apply_config_text(&mut cfg, "steps 50\n").is_err());
    }

    #[test]
    fn invalid_final_config_fails_validation() {
        let err = build_config(None, &["mix.alpha=1.5".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn defaults_follow_the_documented_operating_point() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.sampler.group_size, 8);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.mix.alpha, 0.5);
        assert_eq!(cfg.mix.w_min, 0.05);
        assert_eq!(cfg.mix.w_max, 0.15);
        assert_eq!(cfg.mix.gamma, 2.0);
        assert_eq!(cfg.reward.beta, 2.0);
        assert_eq!(cfg.grpo.variant, GrpoVariant::DrGrpo);
        assert_eq!(cfg.dpo.variant, DpoVariant::LnDpo);
    }
}
