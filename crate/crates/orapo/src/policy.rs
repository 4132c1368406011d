//! Minimal differentiable autoregressive categorical sequence policy.
//!
//! The policy conditions on a study context vector and the bag of tokens
//! emitted so far:
//!
//! ```text
//! logits = U^T · tanh(W_c^T · ctx + W_p^T · bag(prefix) + b)
//! ```
//!
//! Sampling, exact sequence log-probabilities, analytic gradients (reverse
//! accumulation through tanh and softmax) and exact per-step categorical KL
//! to a frozen reference are all provided here. The vocabulary is tiny
//! (`{BOS, EOS} ∪ {assert(l), negate(l)}`), so everything is computed over
//! the full token distribution — no sampled estimators.

use rand::Rng;

use crate::{Error, Result};

/// Dense token id in `0..V`.
pub type TokenId = usize;

/// Structured token vocabulary: `BOS`, `EOS`, then one assert and one
/// negate token per label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    label_count: usize,
}

/// What a token id means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Bos,
    Eos,
    /// Asserts the presence of label `l`.
    Assert(usize),
    /// Negates label `l`.
    Negate(usize),
}

impl Vocabulary {
    pub const BOS: TokenId = 0;
    pub const EOS: TokenId = 1;

    pub fn new(label_count: usize) -> Self {
        Self { label_count }
    }

    /// Total vocabulary size `V = 2 + 2L`.
    pub fn size(&self) -> usize {
        2 + 2 * self.label_count
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn assert_token(&self, label: usize) -> TokenId {
        debug_assert!(label < self.label_count);
        2 + label
    }

    pub fn negate_token(&self, label: usize) -> TokenId {
        debug_assert!(label < self.label_count);
        2 + self.label_count + label
    }

    pub fn kind(&self, token: TokenId) -> Result<TokenKind> {
        match token {
            Self::BOS => Ok(TokenKind::Bos),
            Self::EOS => Ok(TokenKind::Eos),
            t if t < 2 + self.label_count => Ok(TokenKind::Assert(t - 2)),
            t if t < self.size() => Ok(TokenKind::Negate(t - 2 - self.label_count)),
            t => Err(Error::Input(format!(
                "token id {t} out of range for vocabulary of size {}",
                self.size()
            ))),
        }
    }
}

/// Study context features; the policy's only view of the input.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextVec {
    pub values: Vec<f64>,
}

impl ContextVec {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// A generated token sequence (BOS implicit, never stored).
///
/// `tokens` contains `EOS` at most once, as the final element, exactly when
/// the sequence ended by sampling `EOS`; `terminated` distinguishes that
/// case from a `max_len` cut-off.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub tokens: Vec<TokenId>,
    pub terminated: bool,
}

impl TokenSeq {
    pub fn new(tokens: Vec<TokenId>, terminated: bool) -> Self {
        Self { tokens, terminated }
    }

    pub fn empty() -> Self {
        Self { tokens: Vec::new(), terminated: false }
    }

    /// Number of sampling steps the sequence accounts for (includes the EOS
    /// step when present).
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Row-major dense matrix. Just enough for this model.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Dense policy parameters; also used as the gradient container (every
/// gradient in this crate has exactly this shape).
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    /// Context dimension D.
    pub ctx_dim: usize,
    /// Hidden width H.
    pub hidden_dim: usize,
    /// Vocabulary size V.
    pub vocab_size: usize,
    /// D×H context projection.
    pub w_ctx: Mat,
    /// V×H prefix bag-of-tokens embedding.
    pub w_prefix: Mat,
    /// H hidden bias.
    pub bias: Vec<f64>,
    /// H×V output projection.
    pub w_out: Mat,
}

impl PolicyParams {
    pub fn zeros(ctx_dim: usize, hidden_dim: usize, vocab_size: usize) -> Self {
        Self {
            ctx_dim,
            hidden_dim,
            vocab_size,
            w_ctx: Mat::zeros(ctx_dim, hidden_dim),
            w_prefix: Mat::zeros(vocab_size, hidden_dim),
            bias: vec![0.0; hidden_dim],
            w_out: Mat::zeros(hidden_dim, vocab_size),
        }
    }

    /// Small random init with an optional logit bias toward EOS.
    ///
    /// `eos_logit` is injected through a constant hidden direction (the last
    /// hidden unit gets a saturated positive bias and an output column that
    /// favours EOS), so an untrained policy emits mostly empty reports —
    /// the sparse-reward regime the trainer is designed to escape.
    pub fn init<R: Rng>(
        ctx_dim: usize,
        hidden_dim: usize,
        vocab_size: usize,
        weight_scale: f64,
        eos_logit: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(ctx_dim, hidden_dim, vocab_size);
        for x in p.w_ctx.data_mut() {
            *x = weight_scale * gaussian(rng);
        }
        for x in p.w_prefix.data_mut() {
            *x = weight_scale * gaussian(rng);
        }
        for x in p.w_out.data_mut() {
            *x = weight_scale * gaussian(rng);
        }
        if eos_logit != 0.0 && hidden_dim > 0 {
            let h = hidden_dim - 1;
            p.bias[h] = 40.0; // tanh saturates to exactly 1.0
            *p.w_out.at_mut(h, Vocabulary::EOS) = eos_logit;
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.ctx_dim * self.hidden_dim
            + self.vocab_size * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.vocab_size
    }

    /// Deep copy; later updates to the live parameters leave it untouched.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    pub fn same_shape(&self, other: &PolicyParams) -> bool {
        self.ctx_dim == other.ctx_dim
            && self.hidden_dim == other.hidden_dim
            && self.vocab_size == other.vocab_size
    }

    /// Flattened view in a fixed order (w_ctx, w_prefix, bias, w_out).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend_from_slice(self.w_ctx.data());
        out.extend_from_slice(self.w_prefix.data());
        out.extend_from_slice(&self.bias);
        out.extend_from_slice(self.w_out.data());
        out
    }

    pub fn from_flat(ctx_dim: usize, hidden_dim: usize, vocab_size: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(ctx_dim, hidden_dim, vocab_size);
        if flat.len() != p.param_count() {
            return Err(Error::Config(format!(
                "flat parameter vector has length {}, expected {}",
                flat.len(),
                p.param_count()
            )));
        }
        let (a, rest) = flat.split_at(ctx_dim * hidden_dim);
        let (b, rest) = rest.split_at(vocab_size * hidden_dim);
        let (c, d) = rest.split_at(hidden_dim);
        p.w_ctx.data_mut().copy_from_slice(a);
        p.w_prefix.data_mut().copy_from_slice(b);
        p.bias.copy_from_slice(c);
        p.w_out.data_mut().copy_from_slice(d);
        Ok(p)
    }

    /// `self += a * other`, elementwise.
    pub fn axpy(&mut self, a: f64, other: &PolicyParams) {
        debug_assert!(self.same_shape(other));
        for (x, y) in self.w_ctx.data_mut().iter_mut().zip(other.w_ctx.data()) {
            *x += a * y;
        }
        for (x, y) in self.w_prefix.data_mut().iter_mut().zip(other.w_prefix.data()) {
            *x += a * y;
        }
        for (x, y) in self.bias.iter_mut().zip(&other.bias) {
            *x += a * y;
        }
        for (x, y) in self.w_out.data_mut().iter_mut().zip(other.w_out.data()) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for x in self.w_ctx.data_mut() {
            *x *= a;
        }
        for x in self.w_prefix.data_mut() {
            *x *= a;
        }
        for x in self.bias.iter_mut() {
            *x *= a;
        }
        for x in self.w_out.data_mut() {
            *x *= a;
        }
    }

    /// Max absolute entry; used for exact zero-gradient checks.
    pub fn max_abs(&self) -> f64 {
        self.to_flat().iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; two uniforms per normal keeps the stream layout simple.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Rollout sampling configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Group size K.
    pub group_size: usize,
    /// Maximum sampled tokens per sequence (EOS step included).
    pub max_len: usize,
    /// Sampling temperature; log-probs are always recorded at temperature 1.
    pub temperature: f64,
    /// Default stream seed for callers that do not thread their own RNG.
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { group_size: 8, max_len: 12, temperature: 1.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::Config("group_size must be at least 2".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// K rollouts for one prompt, with behaviour-policy log-probs and rewards.
#[derive(Debug, Clone)]
pub struct RolloutGroup {
    pub sequences: Vec<TokenSeq>,
    /// Per-token log-probs under the sampling (behaviour) parameters.
    pub step_logps: Vec<Vec<f64>>,
    /// Sequence log-probs under the behaviour parameters (sum of steps).
    pub logp_old: Vec<f64>,
    /// Sequence log-probs under the live parameters; refreshed by the loss.
    pub logp_new: Vec<f64>,
    /// Scalar rewards in [0, 1]; zero until `set_rewards`.
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn size(&self) -> usize {
        self.sequences.len()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.sequences.iter().map(|s| s.len()).collect()
    }

    pub fn set_rewards(&mut self, rewards: Vec<f64>) -> Result<()> {
        if rewards.len() != self.size() {
            return Err(Error::Input(format!(
                "expected {} rewards, got {}",
                self.size(),
                rewards.len()
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::Input("non-finite reward".into()));
        }
        self.rewards = rewards;
        Ok(())
    }

    pub fn mean_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            return 0.0;
        }
        self.rewards.iter().sum::<f64>() / self.rewards.len() as f64
    }
}

fn check_dims(params: &PolicyParams, ctx: &ContextVec) -> Result<()> {
    if ctx.dim() != params.ctx_dim {
        return Err(Error::Config(format!(
            "context dim {} does not match policy ctx_dim {}",
            ctx.dim(),
            params.ctx_dim
        )));
    }
    Ok(())
}

fn check_tokens(params: &PolicyParams, tokens: &[TokenId]) -> Result<()> {
    for &t in tokens {
        if t >= params.vocab_size {
            return Err(Error::Input(format!(
                "token id {t} out of range for vocab size {}",
                params.vocab_size
            )));
        }
    }
    Ok(())
}

/// Forward pass pieces for one prefix: (hidden activations, logits).
fn forward_parts(params: &PolicyParams, ctx: &ContextVec, prefix: &[TokenId]) -> (Vec<f64>, Vec<f64>) {
    let h = params.hidden_dim;
    let v = params.vocab_size;
    let mut act = params.bias.clone();
    for (d_i, &x) in ctx.values.iter().enumerate() {
        if x != 0.0 {
            for h_i in 0..h {
                act[h_i] += params.w_ctx.at(d_i, h_i) * x;
            }
        }
    }
    for &t in prefix {
        for h_i in 0..h {
            act[h_i] += params.w_prefix.at(t, h_i);
        }
    }
    let hidden: Vec<f64> = act.iter().map(|a| a.tanh()).collect();
    let mut logits = vec![0.0; v];
    for h_i in 0..h {
        let hv = hidden[h_i];
        if hv != 0.0 {
            for v_i in 0..v {
                logits[v_i] += params.w_out.at(h_i, v_i) * hv;
            }
        }
    }
    (hidden, logits)
}

/// Next-token logits for a prefix: `U^T · tanh(W_c^T·ctx + W_p^T·bag + b)`.
pub fn forward_logits(params: &PolicyParams, ctx: &ContextVec, prefix: &TokenSeq) -> Result<Vec<f64>> {
    check_dims(params, ctx)?;
    check_tokens(params, &prefix.tokens)?;
    debug_assert!(!prefix.terminated, "cannot extend a terminated sequence");
    Ok(forward_parts(params, ctx, &prefix.tokens).1)
}

/// Log-softmax with the usual max shift; exact for our tiny vocabularies.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|l| l.exp()).collect()
}

fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// Sample K sequences autoregressively.
///
/// The temperature shapes the sampling distribution only; recorded
/// log-probs are always the temperature-1 log-probs of the taken tokens,
/// because ratios and losses are defined under the policy being optimised.
pub fn sample_group<R: Rng>(
    params: &PolicyParams,
    ctx: &ContextVec,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<RolloutGroup> {
    cfg.validate()?;
    check_dims(params, ctx)?;
    let mut sequences = Vec::with_capacity(cfg.group_size);
    let mut step_logps = Vec::with_capacity(cfg.group_size);
    let mut logp_old = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let mut tokens: Vec<TokenId> = Vec::new();
        let mut logps: Vec<f64> = Vec::new();
        let mut terminated = false;
        while tokens.len() < cfg.max_len {
            let (_, logits) = forward_parts(params, ctx, &tokens);
            let token = if cfg.temperature == 1.0 {
                sample_categorical(&softmax(&logits), rng)
            } else {
                let scaled: Vec<f64> = logits.iter().map(|z| z / cfg.temperature).collect();
                sample_categorical(&softmax(&scaled), rng)
            };
            logps.push(log_softmax(&logits)[token]);
            tokens.push(token);
            if token == Vocabulary::EOS {
                terminated = true;
                break;
            }
        }
        logp_old.push(logps.iter().sum());
        step_logps.push(logps);
        sequences.push(TokenSeq::new(tokens, terminated));
    }
    Ok(RolloutGroup {
        sequences,
        step_logps,
        logp_old: logp_old.clone(),
        logp_new: logp_old,
        rewards: vec![0.0; cfg.group_size],
    })
}

/// Convenience wrapper that seeds its own stream from `cfg.seed`.
pub fn sample_group_seeded(params: &PolicyParams, ctx: &ContextVec, cfg: &SamplerConfig) -> Result<RolloutGroup> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    sample_group(params, ctx, cfg, &mut rng)
}

/// Exact sequence log-probability: sum of per-step temperature-1
/// log-softmax values, the EOS step included when present.
pub fn sequence_log_prob(params: &PolicyParams, ctx: &ContextVec, seq: &TokenSeq) -> Result<f64> {
    check_dims(params, ctx)?;
    check_tokens(params, &seq.tokens)?;
    let mut total = 0.0;
    for (t, &token) in seq.tokens.iter().enumerate() {
        let (_, logits) = forward_parts(params, ctx, &seq.tokens[..t]);
        total += log_softmax(&logits)[token];
    }
    Ok(total)
}

/// Accumulate `scale * dL/dlogits` into `grad` for one prefix.
fn backprop_logits(
    params: &PolicyParams,
    ctx: &ContextVec,
    prefix: &[TokenId],
    hidden: &[f64],
    dlogits: &[f64],
    scale: f64,
    grad: &mut PolicyParams,
) {
    let h = params.hidden_dim;
    let v = params.vocab_size;
    // dU[h][v] += hidden[h] * g[v]
    for h_i in 0..h {
        let hv = hidden[h_i];
        if hv != 0.0 {
            for v_i in 0..v {
                *grad.w_out.at_mut(h_i, v_i) += scale * hv * dlogits[v_i];
            }
        }
    }
    // e[h] = (1 - hidden^2) * sum_v U[h][v] g[v]
    let mut err = vec![0.0; h];
    for h_i in 0..h {
        let mut s = 0.0;
        for v_i in 0..v {
            s += params.w_out.at(h_i, v_i) * dlogits[v_i];
        }
        err[h_i] = (1.0 - hidden[h_i] * hidden[h_i]) * s * scale;
    }
    for h_i in 0..h {
        grad.bias[h_i] += err[h_i];
    }
    for (d_i, &x) in ctx.values.iter().enumerate() {
        if x != 0.0 {
            for h_i in 0..h {
                *grad.w_ctx.at_mut(d_i, h_i) += x * err[h_i];
            }
        }
    }
    for &t in prefix {
        for h_i in 0..h {
            *grad.w_prefix.at_mut(t, h_i) += err[h_i];
        }
    }
}

/// Exact analytic gradient of [`sequence_log_prob`] with parameter shape.
pub fn log_prob_grad(params: &PolicyParams, ctx: &ContextVec, seq: &TokenSeq) -> Result<PolicyParams> {
    check_dims(params, ctx)?;
    check_tokens(params, &seq.tokens)?;
    let mut grad = PolicyParams::zeros(params.ctx_dim, params.hidden_dim, params.vocab_size);
    for (t, &token) in seq.tokens.iter().enumerate() {
        let prefix = &seq.tokens[..t];
        let (hidden, logits) = forward_parts(params, ctx, prefix);
        let probs = softmax(&logits);
        // d log p[token] / d z_v = 1[v == token] - softmax(z)_v
        let mut dlogits: Vec<f64> = probs.iter().map(|p| -p).collect();
        dlogits[token] += 1.0;
        backprop_logits(params, ctx, prefix, &hidden, &dlogits, 1.0, &mut grad);
    }
    Ok(grad)
}

/// Exact per-step categorical KL(policy ‖ reference), averaged over the
/// sampled-sequence positions, and its gradient w.r.t. the live parameters.
///
/// Returns (0, zero gradient) for an empty sequence.
pub fn step_kl(
    params: &PolicyParams,
    reference: &PolicyParams,
    ctx: &ContextVec,
    seq: &TokenSeq,
) -> Result<(f64, PolicyParams)> {
    if !params.same_shape(reference) {
        return Err(Error::Config("policy and reference shapes differ".into()));
    }
    check_dims(params, ctx)?;
    check_tokens(params, &seq.tokens)?;
    let mut grad = PolicyParams::zeros(params.ctx_dim, params.hidden_dim, params.vocab_size);
    if seq.tokens.is_empty() {
        return Ok((0.0, grad));
    }
    let steps = seq.tokens.len();
    let inv = 1.0 / steps as f64;
    let mut total = 0.0;
    for t in 0..steps {
        let prefix = &seq.tokens[..t];
        let (hidden, logits) = forward_parts(params, ctx, prefix);
        let (_, ref_logits) = forward_parts(reference, ctx, prefix);
        let logp = log_softmax(&logits);
        let logq = log_softmax(&ref_logits);
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let kl: f64 = probs
            .iter()
            .zip(logp.iter().zip(&logq))
            .map(|(p, (lp, lq))| p * (lp - lq))
            .sum();
        total += kl;
        // dKL/dz_w = p_w * ((log p_w - log q_w) - KL)
        let dlogits: Vec<f64> = probs
            .iter()
            .zip(logp.iter().zip(&logq))
            .map(|(p, (lp, lq))| p * ((lp - lq) - kl))
            .collect();
        backprop_logits(params, ctx, prefix, &hidden, &dlogits, inv, &mut grad);
    }
    Ok((total * inv, grad))
}

/// Greedy (argmax) decode at temperature 1; ties break toward the lowest id.
pub fn greedy_decode(params: &PolicyParams, ctx: &ContextVec, max_len: usize) -> Result<TokenSeq> {
    check_dims(params, ctx)?;
    let mut tokens: Vec<TokenId> = Vec::new();
    let mut terminated = false;
    while tokens.len() < max_len {
        let (_, logits) = forward_parts(params, ctx, &tokens);
        let mut best = 0;
        for (i, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = i;
            }
        }
        tokens.push(best);
        if best == Vocabulary::EOS {
            terminated = true;
            break;
        }
    }
    Ok(TokenSeq::new(tokens, terminated))
}
