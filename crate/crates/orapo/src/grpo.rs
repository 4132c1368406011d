//! Critic-free group-relative policy optimisation.
//!
//! For a group of K rollouts with rewards `r_j`:
//!
//! ```text
//! r_bar = mean(r)        sigma = sqrt(mean((r - r_bar)^2) + eps_var)
//! A_j   = (r_j - r_bar) / sigma                 (vanilla)
//! A_j   = r_j - r_bar                           (dr_grpo)
//! rho_j = exp(logp_new_j - logp_old_j)
//! loss  = -mean_j min(rho_j A_j, clip(rho_j, 1-eps, 1+eps) A_j)
//!         + lambda_kl * mean_j KL(policy || reference)
//! ```
//!
//! The vanilla variant divides each per-sequence surrogate by its token
//! count; `dr_grpo` drops both that division and the sigma scaling, the
//! combination that removes length bias from on-policy updates. An
//! all-equal-reward group has zero advantages everywhere and therefore
//! contributes no surrogate gradient at all.

use crate::policy::{log_prob_grad, sequence_log_prob, step_kl, ContextVec, PolicyParams, RolloutGroup};
use crate::{Error, Result};

/// Advantage/surrogate variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrpoVariant {
    Vanilla,
    DrGrpo,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoConfig {
    /// Variance guard inside the sigma square root.
    pub eps_var: f64,
    /// PPO clipping threshold.
    pub eps_clip: f64,
    /// KL regularisation weight toward the frozen reference.
    pub lambda_kl: f64,
    pub variant: GrpoVariant,
    /// Optimizer steps per sampled batch (ratios stay 1 when this is 1).
    pub inner_epochs: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            eps_var: 1e-8,
            eps_clip: 0.2,
            lambda_kl: 0.02,
            variant: GrpoVariant::DrGrpo,
            inner_epochs: 1,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_var > 0.0) {
            return Err(Error::Config("eps_var must be positive".into()));
        }
        if !(self.eps_clip > 0.0 && self.eps_clip < 1.0) {
            return Err(Error::Config("eps_clip must be in (0, 1)".into()));
        }
        if self.lambda_kl < 0.0 {
            return Err(Error::Config("lambda_kl must be nonnegative".into()));
        }
        if self.inner_epochs == 0 {
            return Err(Error::Config("inner_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Group-normalised advantages (population variance, per the vanilla
/// construction) or plain mean-centred rewards for `dr_grpo`.
pub fn group_advantages(rewards: &[f64], cfg: &GrpoConfig) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::Config(format!(
            "advantage groups need K >= 2, got {}",
            rewards.len()
        )));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Input("non-finite reward in group".into()));
    }
    let k = rewards.len() as f64;
    // An all-equal group carries no relative signal; short-circuit so the
    // advantages are exactly zero rather than rounding residue.
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let mean = rewards.iter().sum::<f64>() / k;
    match cfg.variant {
        GrpoVariant::DrGrpo => Ok(rewards.iter().map(|r| r - mean).collect()),
        GrpoVariant::Vanilla => {
            let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / k;
            let sigma = (var + cfg.eps_var).sqrt();
            Ok(rewards.iter().map(|r| (r - mean) / sigma).collect())
        }
    }
}

/// Exponent clamp keeping `exp` finite; unreachable in normal training.
const RATIO_EXPONENT_CLAMP: f64 = 30.0;

/// PPO importance ratio `exp(logp_new - logp_old)` with a clamped exponent.
pub fn ppo_ratio(logp_new: f64, logp_old: f64) -> f64 {
    (logp_new - logp_old).clamp(-RATIO_EXPONENT_CLAMP, RATIO_EXPONENT_CLAMP).exp()
}

/// Clipped-surrogate GRPO loss and its analytic gradient.
///
/// Recomputes `logp_new` for every sequence under the live parameters
/// (stored back into the group) while `logp_old` stays fixed at the
/// behaviour-policy values recorded at sampling time. Advantages and the
/// old log-probs are treated as constants by the gradient.
pub fn grpo_loss(
    group: &mut RolloutGroup,
    params: &PolicyParams,
    reference: &PolicyParams,
    ctx: &ContextVec,
    cfg: &GrpoConfig,
) -> Result<(f64, PolicyParams)> {
    cfg.validate()?;
    if group.size() == 0 {
        return Err(Error::Config("empty rollout group".into()));
    }
    let advantages = group_advantages(&group.rewards, cfg)?;
    let k = group.size() as f64;
    let mut loss = 0.0;
    let mut grad = PolicyParams::zeros(params.ctx_dim, params.hidden_dim, params.vocab_size);
    for j in 0..group.size() {
        let seq = &group.sequences[j];
        let lp_new = sequence_log_prob(params, ctx, seq)?;
        group.logp_new[j] = lp_new;
        let a = advantages[j];
        let norm = match cfg.variant {
            GrpoVariant::Vanilla => seq.len().max(1) as f64,
            GrpoVariant::DrGrpo => 1.0,
        };
        let exponent = lp_new - group.logp_old[j];
        let rho = ppo_ratio(lp_new, group.logp_old[j]);
        let unclipped = rho * a;
        let clipped = rho.clamp(1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip) * a;
        let surrogate = unclipped.min(clipped);
        loss -= surrogate / (k * norm);
        if a != 0.0 && unclipped <= clipped && exponent.abs() < RATIO_EXPONENT_CLAMP {
            // min takes the unclipped branch: d(rho * a)/dtheta = a * rho * dlogp.
            let coef = -a * rho / (k * norm);
            let dlogp = log_prob_grad(params, ctx, seq)?;
            grad.axpy(coef, &dlogp);
        }
        // Clipped branch active: constant in theta, no gradient.
    }
    if cfg.lambda_kl > 0.0 {
        for seq in &group.sequences {
            let (kl, kl_grad) = step_kl(params, reference, ctx, seq)?;
            loss += cfg.lambda_kl * kl / k;
            grad.axpy(cfg.lambda_kl / k, &kl_grad);
        }
    }
    Ok((loss, grad))
}
