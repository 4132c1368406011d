//! Direct preference optimisation against a frozen reference.
//!
//! Pairs put the ground-truth report on the preferred side and sampled
//! rollouts on the rejected side:
//!
//! ```text
//! delta_plus  = log pi(y+) - log pi_ref(y+)
//! delta_minus = log pi(y-) - log pi_ref(y-)
//! loss = -mean log sigmoid(tau * (delta_plus - delta_minus))
//! ```
//!
//! The `ln_dpo` variant divides each sequence log-prob by its token count
//! before differencing, so long and short completions trade at the same
//! per-token rate. At `params == reference` every margin is zero and the
//! loss is exactly `ln 2`.

use crate::policy::{log_prob_grad, sequence_log_prob, ContextVec, PolicyParams, RolloutGroup, TokenSeq};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpoVariant {
    Vanilla,
    LnDpo,
}

/// Which rollouts become rejected samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativesPolicy {
    /// Every rollout in the group (the default pairing rule).
    AllRollouts,
    /// Only rollouts whose reward is at or below the zero threshold.
    ZeroRewardOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoConfig {
    /// Preference temperature tau > 0.
    pub tau: f64,
    pub variant: DpoVariant,
    pub negatives_policy: NegativesPolicy,
    /// Threshold for `ZeroRewardOnly` selection.
    pub zero_threshold: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            variant: DpoVariant::LnDpo,
            negatives_policy: NegativesPolicy::AllRollouts,
            zero_threshold: 0.0,
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

/// One preference pair: ground truth preferred over a sampled rollout.
#[derive(Debug, Clone)]
pub struct PreferencePair {
    pub ctx: ContextVec,
    pub y_plus: TokenSeq,
    pub y_minus: TokenSeq,
    /// Reward the rejected rollout earned; kept for telemetry.
    pub minus_reward: f64,
}

/// Build preference pairs from a scored rollout group.
///
/// Rollouts textually identical to the ground truth are excluded; an empty
/// result means the caller should skip the DPO term for this prompt.
pub fn build_pairs(
    group: &RolloutGroup,
    gt: &TokenSeq,
    ctx: &ContextVec,
    cfg: &DpoConfig,
) -> Result<Vec<PreferencePair>> {
    if gt.is_empty() {
        return Err(Error::Input("ground-truth report must be nonempty".into()));
    }
    let mut pairs = Vec::new();
    for (j, seq) in group.sequences.iter().enumerate() {
        if seq == gt {
            continue;
        }
        let selected = match cfg.negatives_policy {
            NegativesPolicy::AllRollouts => true,
            NegativesPolicy::ZeroRewardOnly => group.rewards[j] <= cfg.zero_threshold,
        };
        if selected {
            pairs.push(PreferencePair {
                ctx: ctx.clone(),
                y_plus: gt.clone(),
                y_minus: seq.clone(),
                minus_reward: group.rewards[j],
            });
        }
    }
    Ok(pairs)
}

fn margin_scale(variant: DpoVariant, seq: &TokenSeq) -> f64 {
    match variant {
        DpoVariant::Vanilla => 1.0,
        DpoVariant::LnDpo => 1.0 / seq.len().max(1) as f64,
    }
}

/// Log-probability margins (preferred, rejected) relative to the reference.
pub fn dpo_margins(
    params: &PolicyParams,
    reference: &PolicyParams,
    pair: &PreferencePair,
    cfg: &DpoConfig,
) -> Result<(f64, f64)> {
    let sp = margin_scale(cfg.variant, &pair.y_plus);
    let sm = margin_scale(cfg.variant, &pair.y_minus);
    let plus = sp
        * (sequence_log_prob(params, &pair.ctx, &pair.y_plus)?
            - sequence_log_prob(reference, &pair.ctx, &pair.y_plus)?);
    let minus = sm
        * (sequence_log_prob(params, &pair.ctx, &pair.y_minus)?
            - sequence_log_prob(reference, &pair.ctx, &pair.y_minus)?);
    Ok((plus, minus))
}

/// Numerically stable `-log sigmoid(x) = softplus(-x)`.
fn neg_log_sigmoid(x: f64) -> f64 {
    (-x).max(0.0) + (-(-x).abs()).exp().ln_1p()
}

/// Mean preference loss over the pairs and its gradient.
///
/// Errors on an empty pair list; the caller decides when to skip DPO.
pub fn dpo_loss(
    pairs: &[PreferencePair],
    params: &PolicyParams,
    reference: &PolicyParams,
    cfg: &DpoConfig,
) -> Result<(f64, PolicyParams)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("dpo_loss requires at least one preference pair".into()));
    }
    let n = pairs.len() as f64;
    let mut loss = 0.0;
    let mut grad = PolicyParams::zeros(params.ctx_dim, params.hidden_dim, params.vocab_size);
    for pair in pairs {
        let (dp, dm) = dpo_margins(params, reference, pair, cfg)?;
        let margin = dp - dm;
        loss += neg_log_sigmoid(cfg.tau * margin) / n;
        // d/dm [-log sigmoid(tau m)] = -tau * (1 - sigmoid(tau m))
        let sig = 1.0 / (1.0 + (-cfg.tau * margin).exp());
        let dmargin = -cfg.tau * (1.0 - sig) / n;
        let sp = margin_scale(cfg.variant, &pair.y_plus);
        let sm = margin_scale(cfg.variant, &pair.y_minus);
        let gp = log_prob_grad(params, &pair.ctx, &pair.y_plus)?;
        grad.axpy(dmargin * sp, &gp);
        let gm = log_prob_grad(params, &pair.ctx, &pair.y_minus)?;
        grad.axpy(-dmargin * sm, &gm);
    }
    Ok((loss, grad))
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

    fn sampled_group(params: &PolicyParams, ctx: &ContextVec, seed: u64, k: usize) -> RolloutGroup {
        let cfg = SamplerConfig { group_size: k, max_len: 4, temperature: 1.0, seed };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_group(params, ctx, &cfg, &mut rng).unwrap()
    }

    #[test]
    fn all_rollouts_policy_pairs_every_distinct_rollout() {
        let params = rand_params(1);
        let ctx = rand_ctx(2);
        let group = sampled_group(&params, &ctx, 3, 8);
        let gt = gt_seq();
        assert!(group.sequences.iter().all(|s| *s != gt));
        let pairs = build_pairs(&group, &gt, &ctx, &DpoConfig::default()).unwrap();
        assert_eq!(pairs.len(), 8);
        assert!(pairs.iter().all(|p| p.y_plus == gt));
    }

    #[test]
    fn rollouts_identical_to_ground_truth_are_excluded() {
        let params = rand_params(11);
        let ctx = rand_ctx(12);
        let mut group = sampled_group(&params, &ctx, 13, 4);
        let gt = gt_seq();
        for seq in group.sequences.iter_mut() {
            *seq = gt.clone();
        }
        let pairs = build_pairs(&group, &gt, &ctx, &DpoConfig::default()).unwrap();
        assert!(pairs.is_empty());
    }

    #[test]
    fn zero_reward_only_filters_by_threshold() {
        let params = rand_params(21);
        let ctx = rand_ctx(22);
        let mut group = sampled_group(&params, &ctx, 23, 4);
        group.set_rewards(vec![0.0, 0.0, 0.4, 0.0]).unwrap();
        let cfg = DpoConfig { negatives_policy: NegativesPolicy::ZeroRewardOnly, ..DpoConfig::default() };
        let pairs = build_pairs(&group, &gt_seq(), &ctx, &cfg).unwrap();
        assert_eq!(pairs.len(), 3);
        assert!(pairs.iter().all(|p| p.minus_reward == 0.0));
    }

    #[test]
    fn empty_ground_truth_is_input_error() {
        let params = rand_params(31);
        let ctx = rand_ctx(32);
        let group = sampled_group(&params, &ctx, 33, 4);
        let err = build_pairs(&group, &TokenSeq::empty(), &ctx, &DpoConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn margins_vanish_at_reference() {
        let params = rand_params(41);
        let ctx = rand_ctx(42);
        let pair = PreferencePair {
            ctx: ctx.clone(),
            y_plus: gt_seq(),
            y_minus: TokenSeq::new(vec![3], false),
            minus_reward: 0.0,
        };
        for variant in [DpoVariant::Vanilla, DpoVariant::LnDpo] {
            let cfg = DpoConfig { variant, ..DpoConfig::default() };
            let (dp, dm) = dpo_margins(&params, &params, &pair, &cfg).unwrap();
            assert_eq!(dp, 0.0);
            assert_eq!(dm, 0.0);
        }
    }

    #[test]
    fn length_normalization_equalizes_per_token_margins() {
        // Prefix-independent policies (w_prefix = 0) give each repeated
        // token the same log-prob, so doubling the length doubles the raw
        // margin and ln_dpo restores equality.
        let mut params = rand_params(51);
        params.w_prefix = crate::policy::Mat::zeros(6, 3);
        let mut reference = rand_params(52);
        reference.w_prefix = crate::policy::Mat::zeros(6, 3);
        let ctx = rand_ctx(53);
        let pair = PreferencePair {
            ctx: ctx.clone(),
            y_plus: TokenSeq::new(vec![3, 3], false),
            y_minus: TokenSeq::new(vec![3], false),
            minus_reward: 0.0,
        };
        let cfg = DpoConfig { variant: DpoVariant::LnDpo, ..DpoConfig::default() };
        let (dp, dm) = dpo_margins(&params, &reference, &pair, &cfg).unwrap();
        assert!((dp - dm).abs() < 1e-12);
        let vcfg = DpoConfig { variant: DpoVariant::Vanilla, ..DpoConfig::default() };
        let (vp, vm) = dpo_margins(&params, &reference, &pair, &vcfg).unwrap();
        assert!((vp - 2.0 * vm).abs() < 1e-12);
    }

    #[test]
    fn margins_match_two_pass_recomputation() {
        let params = rand_params(61);
        let reference = rand_params(62);
        let ctx = rand_ctx(63);
        let pair = PreferencePair {
            ctx: ctx.clone(),
            y_plus: gt_seq(),
            y_minus: TokenSeq::new(vec![5, 2], false),
            minus_reward: 0.1,
        };
        let cfg = DpoConfig { variant: DpoVariant::Vanilla, ..DpoConfig::default() };
        let (dp, dm) = dpo_margins(&params, &reference, &pair, &cfg).unwrap();
        let want_p = sequence_log_prob(&params, &ctx, &pair.y_plus).unwrap()
            - sequence_log_prob(&reference, &ctx, &pair.y_plus).unwrap();
        let want_m = sequence_log_prob(&params, &ctx, &pair.y_minus).unwrap()
            - sequence_log_prob(&reference, &ctx, &pair.y_minus).unwrap();
        assert!((dp - want_p).abs() < 1e-12);
        assert!((dm - want_m).abs() < 1e-12);
    }

    #[test]
    fn loss_at_reference_is_ln_two() {
        let params = rand_params(71);
        let ctx = rand_ctx(72);
        let group = sampled_group(&params, &ctx, 73, 4);
        let pairs = build_pairs(&group, &gt_seq(), &ctx, &DpoConfig::default()).unwrap();
        let (loss, _) = dpo_loss(&pairs, &params, &params, &DpoConfig::default()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn doubling_tau_lowers_loss_at_positive_margin() {
        let params = rand_params(81);
        let reference = rand_params(82);
        let ctx = rand_ctx(83);
        let pair = PreferencePair {
            ctx: ctx.clone(),
            y_plus: gt_seq(),
            y_minus: TokenSeq::new(vec![5], false),
            minus_reward: 0.0,
        };
        let base = DpoConfig::default();
        let (dp, dm) = dpo_margins(&params, &reference, &pair, &base).unwrap();
        let (params, reference) = if dp - dm > 0.0 { (params, reference) } else { (reference, params) };
        let (l1, _) = dpo_loss(std::slice::from_ref(&pair), &params, &reference, &base).unwrap();
        let doubled = DpoConfig { tau: base.tau * 2.0, ..base };
        let (l2, _) = dpo_loss(std::slice::from_ref(&pair), &params, &reference, &doubled).unwrap();
        assert!(l2 < l1);
    }

    #[test]
    fn loss_depends_only_on_the_margin() {
        // Shifting both margins by a constant leaves the loss unchanged up
        // to rounding: only the difference enters.
        for x in [-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let direct = neg_log_sigmoid(x);
            let shifted = neg_log_sigmoid((x + 10.0) - 10.0);
            assert!((direct - shifted).abs() < 1e-12);
            assert!(direct > 0.0);
        }
        assert!(neg_log_sigmoid(60.0) < 1e-20);
        assert!((neg_log_sigmoid(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in 0..20 {
            let params = rand_params(900 + seed);
            let reference = rand_params(1000 + seed);
            let ctx = rand_ctx(1100 + seed);
            let group = sampled_group(&reference, &ctx, 1200 + seed, 3);
            let pairs = build_pairs(&group, &gt_seq(), &ctx, &DpoConfig::default()).unwrap();
            let cfg = DpoConfig::default();
            let (_, grad) = dpo_loss(&pairs, &params, &reference, &cfg).unwrap();
            let flat = params.to_flat();
            let gflat = grad.to_flat();
            let h = 1e-5;
            for i in (0..flat.len()).step_by(9) {
                let mut up = flat.clone();
                up[i] += h;
                let mut dn = flat.clone();
                dn[i] -= h;
                let pu = PolicyParams::from_flat(3, 3, 6, &up).unwrap();
                let pd = PolicyParams::from_flat(3, 3, 6, &dn).unwrap();
                let fu = dpo_loss(&pairs, &pu, &reference, &cfg).unwrap().0;
                let fdn = dpo_loss(&pairs, &pd, &reference, &cfg).unwrap().0;
                let fd = (fu - fdn) / (2.0 * h);
                let denom = fd.abs().max(gflat[i].abs()).max(1e-8);
                assert!(
                    (fd - gflat[i]).abs() / denom < 1e-4,
                    "seed {seed} coord {i}: fd {fd} vs analytic {}",
                    gflat[i]
                );
            }
        }
    }

    #[test]
    fn descent_step_increases_preferred_margin() {
        let params = rand_params(91);
        let reference = params.clone();
        let ctx = rand_ctx(92);
        let pair = PreferencePair {
            ctx: ctx.clone(),
            y_plus: gt_seq(),
            y_minus: TokenSeq::new(vec![5, 3], false),
            minus_reward: 0.0,
        };
        let cfg = DpoConfig::default();
        let (_, grad) = dpo_loss(std::slice::from_ref(&pair), &params, &reference, &cfg).unwrap();
        let mut stepped = params.clone();
        stepped.axpy(-1e-2, &grad);
        let margin = |p: &PolicyParams| {
            sequence_log_prob(p, &ctx, &pair.y_plus).unwrap()
                - sequence_log_prob(p, &ctx, &pair.y_minus).unwrap()
        };
        assert!(margin(&stepped) > margin(&params));
    }

    #[test]
    fn empty_pairs_is_an_error() {
        let params = rand_params(95);
        assert!(matches!(
            dpo_loss(&[], &params, &params, &DpoConfig::default()),
            Err(Error::Input(_))
        ));
    }
}
