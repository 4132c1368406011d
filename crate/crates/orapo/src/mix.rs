//! Zero-reward-rate tracking and the mixed GRPO + DPO objective.
//!
//! Per prompt, the raw zero-reward rate of a group is EMA-smoothed and
//! mapped to a bounded, monotonic mixing weight:
//!
//! ```text
//! z      = fraction of rollouts with reward <= zero_threshold
//! ema    = alpha * ema_prev + (1 - alpha) * z
//! w      = clip(w_min + (w_max - w_min) * ema^gamma, w_min, w_max)
//! loss   = (1/B) * sum_i [(1 - w_i) * grpo_i + w_i * dpo_i]
//! ```
//!
//! The weight grows toward `w_max` only when a prompt keeps producing
//! all-zero groups — exactly the case where the clipped-surrogate term has
//! no gradient — and decays toward `w_min` once rewards appear. On an
//! all-zero batch the mixed gradient is the weighted DPO gradient, which is
//! generically nonzero, while pure GRPO supplies nothing.

use std::collections::BTreeMap;

use crate::dpo::{build_pairs, dpo_loss, DpoConfig};
use crate::grpo::{grpo_loss, GrpoConfig};
use crate::policy::{ContextVec, PolicyParams, RolloutGroup, TokenSeq};
use crate::{Error, Result};

/// EMA bookkeeping scope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZrrGranularity {
    /// One EMA slot per prompt id.
    PerPrompt,
    /// A single shared slot, fed the batch-level rate once per step.
    PerBatch,
}

/// Mixing-weight schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct MixSchedule {
    /// EMA decay toward history.
    pub alpha: f64,
    pub w_min: f64,
    pub w_max: f64,
    /// Exponent shaping sensitivity; larger concentrates education on the
    /// most severe failures.
    pub gamma: f64,
}

impl Default for MixSchedule {
    fn default() -> Self {
        Self { alpha: 0.5, w_min: 0.05, w_max: 0.15, gamma: 2.0 }
    }
}

impl MixSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config("alpha must be in [0, 1)".into()));
        }
        if !(0.0 <= self.w_min && self.w_min <= self.w_max && self.w_max <= 1.0) {
            return Err(Error::Config("need 0 <= w_min <= w_max <= 1".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        Ok(())
    }

    /// Bounded, monotonic mixing weight for a smoothed zero-reward rate.
    pub fn weight(&self, ema_zrr: f64) -> f64 {
        let w = self.w_min + (self.w_max - self.w_min) * ema_zrr.powf(self.gamma);
        w.clamp(self.w_min, self.w_max)
    }
}

/// Fraction of rewards at or below the zero threshold.
pub fn raw_zrr(rewards: &[f64], zero_threshold: f64) -> f64 {
    if rewards.is_empty() {
        return 0.0;
    }
    let zeros = rewards.iter().filter(|r| **r <= zero_threshold).count();
    zeros as f64 / rewards.len() as f64
}

/// Per-prompt (or per-batch) EMA state of the zero-reward rate.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ZrrState {
    ema: BTreeMap<u64, f64>,
    step: u64,
    granularity: ZrrGranularity,
}

/// Slot key used when tracking one EMA for the whole batch.
const BATCH_SLOT: u64 = u64::MAX;

impl ZrrState {
    pub fn new(granularity: ZrrGranularity) -> Self {
        Self { ema: BTreeMap::new(), step: 0, granularity }
    }

    pub fn granularity(&self) -> ZrrGranularity {
        self.granularity
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn advance_step(&mut self) {
        self.step += 1;
    }

    fn slot(&self, prompt_id: u64) -> u64 {
        match self.granularity {
            ZrrGranularity::PerPrompt => prompt_id,
            ZrrGranularity::PerBatch => BATCH_SLOT,
        }
    }

    /// Smoothed rate for a prompt, if it has been observed.
    pub fn ema(&self, prompt_id: u64) -> Option<f64> {
        self.ema.get(&self.slot(prompt_id)).copied()
    }

    /// EMA update; an unseen prompt initialises its history at the first
    /// observation, so no cold-start bias is introduced.
    pub fn update_ema(&mut self, prompt_id: u64, z: f64, alpha: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&z));
        let slot = self.slot(prompt_id);
        let prev = self.ema.get(&slot).copied().unwrap_or(z);
        let next = alpha * prev + (1.0 - alpha) * z;
        self.ema.insert(slot, next);
        next
    }
}

/// One prompt's contribution to a training batch, prepared by the trainer.
#[derive(Debug, Clone)]
pub struct PromptEval {
    pub prompt_id: u64,
    pub ctx: ContextVec,
    pub gt_report: TokenSeq,
    pub group: RolloutGroup,
    /// Mixing weight already resolved by the caller (0 for pure GRPO).
    pub weight: f64,
    /// Raw and smoothed zero-reward rates, recorded for telemetry.
    pub raw_zrr: f64,
    pub ema_zrr: f64,
}

/// Telemetry row for one prompt in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTelemetry {
    pub prompt_id: u64,
    pub raw_zrr: f64,
    pub ema_zrr: f64,
    pub weight: f64,
    pub mean_reward: f64,
    pub grpo_loss: f64,
    pub dpo_loss: f64,
}

/// Batch objective: the per-prompt convex mix of GRPO and DPO losses.
///
/// When a prompt yields no preference pairs its DPO term is zero and the
/// GRPO coefficient is forced to 1. A weight of exactly zero skips the DPO
/// evaluation entirely, so a pure-GRPO run never touches preference code.
pub fn orapo_batch_loss(
    items: &mut [PromptEval],
    params: &PolicyParams,
    reference: &PolicyParams,
    grpo_cfg: &GrpoConfig,
    dpo_cfg: &DpoConfig,
) -> Result<(f64, PolicyParams, Vec<PromptTelemetry>)> {
    if items.is_empty() {
        return Err(Error::Config("batch must contain at least one prompt".into()));
    }
    let b = items.len() as f64;
    let mut total = 0.0;
    let mut grad = PolicyParams::zeros(params.ctx_dim, params.hidden_dim, params.vocab_size);
    let mut telemetry = Vec::with_capacity(items.len());
    for item in items.iter_mut() {
        let (g_loss, g_grad) = grpo_loss(&mut item.group, params, reference, &item.ctx, grpo_cfg)?;
        let pairs = if item.weight > 0.0 {
            build_pairs(&item.group, &item.gt_report, &item.ctx, dpo_cfg)?
        } else {
            Vec::new()
        };
        let (w, d_loss) = if pairs.is_empty() {
            (0.0, 0.0)
        } else {
            let (d_loss, d_grad) = dpo_loss(&pairs, params, reference, dpo_cfg)?;
            grad.axpy(item.weight / b, &d_grad);
            (item.weight, d_loss)
        };
        total += ((1.0 - w) * g_loss + w * d_loss) / b;
        grad.axpy((1.0 - w) / b, &g_grad);
        telemetry.push(PromptTelemetry {
            prompt_id: item.prompt_id,
            raw_zrr: item.raw_zrr,
            ema_zrr: item.ema_zrr,
            weight: item.weight,
            mean_reward: item.group.mean_reward(),
            grpo_loss: g_loss,
            dpo_loss: d_loss,
        });
    }
    Ok((total, grad, telemetry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{sample_group, SamplerConfig, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_params(seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PolicyParams::init(3, 3, 6, 0.4, 0.0, &mut rng)
    }

    fn rand_ctx(seed: u64) -> ContextVec {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ContextVec::new((0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect())
    }

    fn gt_seq() -> TokenSeq {
        TokenSeq::new(vec![2, 4, Vocabulary::EOS], true)
    }

    fn make_item(params: &PolicyParams, seed: u64, rewards: Vec<f64>, weight: f64) -> PromptEval {
        let ctx = rand_ctx(seed);
        let cfg = SamplerConfig { group_size: rewards.len(), max_len: 4, temperature: 1.0, seed };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut group = sample_group(params, &ctx, &cfg, &mut rng).unwrap();
        group.set_rewards(rewards).unwrap();
        let z = raw_zrr(&group.rewards, 0.0);
        PromptEval {
            prompt_id: seed,
            ctx,
            gt_report: gt_seq(),
            group,
            weight,
            raw_zrr: z,
            ema_zrr: z,
        }
    }

    #[test]
    fn raw_zrr_counts_fractions() {
        assert_eq!(raw_zrr(&[0.0, 0.0, 0.0], 0.0), 1.0);
        assert_eq!(raw_zrr(&[0.2, 0.0, 0.0, 0.0], 0.0), 0.75);
        assert_eq!(raw_zrr(&[0.1, 0.9], 0.0), 0.0);
    }

    #[test]
    fn ema_update_matches_direct_arithmetic() {
        let mut state = ZrrState::new(ZrrGranularity::PerPrompt);
        state.update_ema(7, 0.0, 0.5);
        let z = state.update_ema(7, 1.0, 0.5);
        assert_eq!(z, 0.5);
    }

    #[test]
    fn ema_fixed_point_is_stable() {
        let mut state = ZrrState::new(ZrrGranularity::PerPrompt);
        state.update_ema(1, 0.3, 0.5);
        for _ in 0..10 {
            assert!((state.update_ema(1, 0.3, 0.5) - 0.3).abs() < 1e-15);
        }
    }

    #[test]
    fn repeated_ones_approach_one_geometrically() {
        let mut state = ZrrState::new(ZrrGranularity::PerPrompt);
        state.update_ema(1, 0.0, 0.5);
        for t in 1..=20 {
            let z = state.update_ema(1, 1.0, 0.5);
            let want = 1.0 - 0.5f64.powi(t);
            assert!((z - want).abs() < 1e-12, "t={t}: {z} vs {want}");
        }
    }

    #[test]
    fn unseen_prompt_initializes_at_first_observation() {
        let mut state = ZrrState::new(ZrrGranularity::PerPrompt);
        assert_eq!(state.ema(9), None);
        assert_eq!(state.update_ema(9, 0.75, 0.5), 0.75);
        assert_eq!(state.ema(9), Some(0.75));
    }

    #[test]
    fn per_batch_granularity_shares_one_slot() {
        let mut state = ZrrState::new(ZrrGranularity::PerBatch);
        state.update_ema(1, 1.0, 0.5);
        assert_eq!(state.ema(999), Some(1.0));
    }

    #[test]
    fn ema_contraction_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        use rand::Rng;
        for _ in 0..200 {
            let alpha: f64 = rng.random::<f64>() * 0.99;
            let a0: f64 = rng.random();
            let b0: f64 = rng.random();
            let z: f64 = rng.random();
            let mut sa = ZrrState::new(ZrrGranularity::PerPrompt);
            let mut sb = ZrrState::new(ZrrGranularity::PerPrompt);
            sa.update_ema(0, a0, alpha);
            sb.update_ema(0, b0, alpha);
            let a1 = sa.update_ema(0, z, alpha);
            let b1 = sb.update_ema(0, z, alpha);
            assert!((a1 - b1).abs() <= alpha * (a0 - b0).abs() + 1e-15);
        }
    }

    #[test]
    fn weight_endpoints_and_interior_match_schedule() {
        let s = MixSchedule::default();
        assert_eq!(s.weight(1.0), 0.15);
        assert_eq!(s.weight(0.0), 0.05);
        assert!((s.weight(0.5) - 0.075).abs() < 1e-15);
    }

    #[test]
    fn weight_is_monotone_and_bounded_on_grid() {
        let s = MixSchedule::default();
        let mut prev = -1.0;
        for i in 0..=1000 {
            let z = i as f64 / 1000.0;
            let w = s.weight(z);
            assert!((s.w_min..=s.w_max).contains(&w));
            assert!(w >= prev);
            prev = w;
        }
    }

    #[test]
    fn zero_weights_reduce_to_mean_grpo_loss() {
        let params = rand_params(1);
        let reference = rand_params(2);
        let gcfg = GrpoConfig::default();
        let dcfg = DpoConfig::default();
        let mut items = vec![
            make_item(&params, 10, vec![0.5, 0.0, 0.2, 0.0], 0.0),
            make_item(&params, 11, vec![0.0, 0.9, 0.0, 0.1], 0.0),
        ];
        let (loss, _, telemetry) =
            orapo_batch_loss(&mut items, &params, &reference, &gcfg, &dcfg).unwrap();
        let mut want = 0.0;
        for item in items.iter_mut() {
            want += grpo_loss(&mut item.group, &params, &reference, &item.ctx, &gcfg).unwrap().0 / 2.0;
        }
        assert!((loss - want).abs() < 1e-12);
        assert!(telemetry.iter().all(|t| t.dpo_loss == 0.0 && t.weight == 0.0));
    }

    #[test]
    fn unit_weights_reduce_to_mean_dpo_loss() {
        let params = rand_params(3);
        let reference = rand_params(4);
        let gcfg = GrpoConfig::default();
        let dcfg = DpoConfig::default();
        let mut items = vec![
            make_item(&params, 20, vec![0.0, 0.0, 0.0, 0.0], 1.0),
            make_item(&params, 21, vec![0.0, 0.0, 0.0, 0.0], 1.0),
        ];
        let (loss, _, _) = orapo_batch_loss(&mut items, &params, &reference, &gcfg, &dcfg).unwrap();
        let mut want = 0.0;
        for item in &items {
            let pairs = build_pairs(&item.group, &item.gt_report, &item.ctx, &dcfg).unwrap();
            want += dpo_loss(&pairs, &params, &reference, &dcfg).unwrap().0 / 2.0;
        }
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn gradient_is_affine_combination_of_parts() {
        let params = rand_params(5);
        let reference = rand_params(6);
        let gcfg = GrpoConfig::default();
        let dcfg = DpoConfig::default();
        let w = 0.12;
        let mut items = vec![make_item(&params, 30, vec![0.7, 0.0, 0.0, 0.0], w)];
        let (loss, grad, _) =
            orapo_batch_loss(&mut items, &params, &reference, &gcfg, &dcfg).unwrap();
        let ctx = items[0].ctx.clone();
        let (gl, gg) = grpo_loss(&mut items[0].group, &params, &reference, &ctx, &gcfg).unwrap();
        let pairs = build_pairs(&items[0].group, &items[0].gt_report, &items[0].ctx, &dcfg).unwrap();
        let (dl, dg) = dpo_loss(&pairs, &params, &reference, &dcfg).unwrap();
        assert!((loss - ((1.0 - w) * gl + w * dl)).abs() < 1e-12);
        let mut want = PolicyParams::zeros(3, 3, 6);
        want.axpy(1.0 - w, &gg);
        want.axpy(w, &dg);
        let diff = grad
            .to_flat()
            .iter()
            .zip(want.to_flat())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn objective_is_affine_in_each_weight() {
        let params = rand_params(7);
        let reference = rand_params(8);
        let gcfg = GrpoConfig::default();
        let dcfg = DpoConfig::default();
        let loss_at = |w: f64| {
            let mut items = vec![make_item(&params, 40, vec![0.3, 0.0, 0.0, 0.6], w)];
            orapo_batch_loss(&mut items, &params, &reference, &gcfg, &dcfg).unwrap().0
        };
        let (l0, l_half, l1) = (loss_at(0.0), loss_at(0.5), loss_at(1.0));
        assert!((l_half - 0.5 * (l0 + l1)).abs() < 1e-10);
    }

    #[test]
    fn empty_batch_is_config_error() {
        let params = rand_params(9);
        assert!(matches!(
            orapo_batch_loss(&mut [], &params, &params, &GrpoConfig::default(), &DpoConfig::default()),
            Err(Error::Config(_))
        ));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// The mixing weight is bounded and nondecreasing for every
            /// valid schedule.
            #[test]
            fn weight_bounded_and_monotone(
                w_min in 0.0f64..0.5,
                span in 0.0f64..0.5,
                gamma in 0.1f64..5.0,
                a in 0.0f64..1.0,
                b in 0.0f64..1.0,
            ) {
                let s = MixSchedule { alpha: 0.5, w_min, w_max: w_min + span, gamma };
                s.validate().unwrap();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let (wl, wh) = (s.weight(lo), s.weight(hi));
                prop_assert!(wl >= s.w_min && wh <= s.w_max);
                prop_assert!(wl <= wh);
            }

            /// Two EMA states fed the same observation contract at rate alpha.
            #[test]
            fn ema_contracts(
                alpha in 0.0f64..0.99,
                a0 in 0.0f64..1.0,
                b0 in 0.0f64..1.0,
                z in 0.0f64..1.0,
            ) {
                let mut sa = ZrrState::new(ZrrGranularity::PerPrompt);
                let mut sb = ZrrState::new(ZrrGranularity::PerPrompt);
                sa.update_ema(0, a0, alpha);
                sb.update_ema(0, b0, alpha);
                let a1 = sa.update_ema(0, z, alpha);
                let b1 = sb.update_ema(0, z, alpha);
                prop_assert!((a1 - b1).abs() <= alpha * (a0 - b0).abs() + 1e-12);
            }
        }
    }

    #[test]
    fn all_zero_batch_recovers_signal_through_dpo() {
        let params = rand_params(12);
        let reference = rand_params(13);
        let gcfg = GrpoConfig { lambda_kl: 0.0, ..GrpoConfig::default() };
        let dcfg = DpoConfig::default();
        let w = MixSchedule::default().weight(1.0);
        let mut mixed = vec![make_item(&params, 50, vec![0.0; 4], w)];
        let (_, grad_mixed, _) =
            orapo_batch_loss(&mut mixed, &params, &reference, &gcfg, &dcfg).unwrap();
        assert!(grad_mixed.max_abs() > 0.0);
        let mut pure = vec![make_item(&params, 50, vec![0.0; 4], 0.0)];
        let (_, grad_pure, _) =
            orapo_batch_loss(&mut pure, &params, &reference, &gcfg, &dcfg).unwrap();
        assert_eq!(grad_pure.max_abs(), 0.0);
        // The recovered gradient is exactly w times the DPO gradient.
        let pairs = build_pairs(&mixed[0].group, &mixed[0].gt_report, &mixed[0].ctx, &dcfg).unwrap();
        let (_, dg) = dpo_loss(&pairs, &params, &reference, &dcfg).unwrap();
        let mut want = PolicyParams::zeros(3, 3, 6);
        want.axpy(w, &dg);
        let diff = grad_mixed
            .to_flat()
            .iter()
            .zip(want.to_flat())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }
}
