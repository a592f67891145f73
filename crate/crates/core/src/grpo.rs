//! Group relative policy optimisation.
//!
//! Each iteration samples `G` rollouts per class label under a frozen copy of
//! the policy, scores them, normalises rewards within each group and takes
//! Adam steps on the clipped-ratio surrogate plus a per-token KL penalty to
//! the pretrained reference.

use std::sync::Mutex;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{token_log_prob, LabeledTokens, LossSpec, Policy, PolicyParams, SequenceObjective};
use crate::rewards::RewardSpec;
use crate::sampler::{sample_group, stream_rng, stream_seed, tempered_probs, Trajectory};

/// Exponents of probability ratios are clipped to this magnitude.
pub const LOG_RATIO_CLIP: f64 = 60.0;

const LABEL_STREAM: u64 = 0x6c61_6265_6c73;
const ROLLOUT_STREAM: u64 = 0x726f_6c6c_6f75;
const SHUFFLE_STREAM: u64 = 0x7368_7566_666c;

fn d_group() -> usize {
    16
}
fn d_batch_labels() -> usize {
    8
}
fn d_minibatch() -> usize {
    32
}
fn d_inner_epochs() -> usize {
    1
}
fn d_eps() -> f64 {
    0.2
}
fn d_beta() -> f64 {
    0.2
}
fn d_tau() -> f64 {
    0.7
}
fn d_lr() -> f64 {
    1e-4
}
fn d_iterations() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GRPOConfig {
    /// Rollouts per label.
    #[serde(default = "d_group")]
    pub group_size: usize,
    /// Labels per iteration.
    #[serde(default = "d_batch_labels")]
    pub batch_labels: usize,
    /// Trajectories per optimiser step.
    #[serde(default = "d_minibatch")]
    pub minibatch: usize,
    #[serde(default = "d_inner_epochs")]
    pub inner_epochs: usize,
    #[serde(default = "d_eps")]
    pub clip_eps: f64,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    /// Labels drawn from; all classes when absent.
    #[serde(default)]
    pub labels: Option<Vec<usize>>,
    /// Stop once an iteration's mean reward reaches this value.
    #[serde(default)]
    pub stop_at_reward: Option<f64>,
}

impl Default for GRPOConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl GRPOConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be >= 2, got {}", self.group_size));
        }
        if self.batch_labels == 0 || self.minibatch == 0 || self.inner_epochs == 0 {
            return bad("batch_labels, minibatch and inner_epochs must be positive".into());
        }
        if self.minibatch > self.batch_labels * self.group_size {
            return bad(format!(
                "minibatch {} exceeds batch_labels·group_size = {}",
                self.minibatch,
                self.batch_labels * self.group_size
            ));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if let Some(l) = &self.labels {
            if l.is_empty() {
                return bad("labels must not be empty".into());
            }
        }
        Ok(())
    }

    fn label_set(&self, n_classes: usize) -> Result<Vec<usize>> {
        let set = self.labels.clone().unwrap_or_else(|| (0..n_classes).collect());
        if let Some(&c) = set.iter().find(|&&c| c >= n_classes) {
            return Err(Error::invalid(format!("label {c} out of range for {n_classes} classes")));
        }
        Ok(set)
    }
}

/// `(r_i − mean) / std` with population std; all zeros when std < 1e-8.
pub fn compute_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid(format!("advantages need G >= 2, got {}", rewards.len())));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::Numeric("non-finite reward".into()));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-8 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

fn clip_log_ratio(x: f64) -> f64 {
    if x.abs() > LOG_RATIO_CLIP {
        log::warn!("log-ratio {x:.3} clipped to ±{LOG_RATIO_CLIP}");
    }
    x.clamp(-LOG_RATIO_CLIP, LOG_RATIO_CLIP)
}

/// `ρ − log ρ − 1` with `ρ = π_ref / π_θ`; always ≥ 0.
pub fn kl_term(logp_ref: f64, logp_theta: f64) -> f64 {
    let x = clip_log_ratio(logp_ref - logp_theta);
    x.exp() - x - 1.0
}

/// `min(ρ·A, clip(ρ, 1−ε, 1+ε)·A)` with `ρ = π_new / π_old`.
pub fn clipped_surrogate(logp_new: f64, logp_old: f64, advantage: f64, eps: f64) -> f64 {
    let ratio = clip_log_ratio(logp_new - logp_old).exp();
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// One trajectory's view for the loss.
#[derive(Clone, Copy, Debug)]
pub struct LossItem<'a> {
    pub class: usize,
    pub tokens: &'a crate::msvq::MultiScaleTokens,
    pub old_log_probs: &'a [f64],
    pub ref_log_probs: &'a [f64],
    pub advantage: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    pub tokens: usize,
    pub kl_sum: f64,
    pub clipped: usize,
}

impl LossStats {
    pub fn kl_mean(&self) -> f64 {
        self.kl_sum / self.tokens.max(1) as f64
    }

    pub fn clip_frac(&self) -> f64 {
        self.clipped as f64 / self.tokens.max(1) as f64
    }
}

struct GrpoObjective<'a> {
    items: &'a [LossItem<'a>],
    eps: f64,
    beta: f64,
    tau: f64,
    inv_tokens: f64,
    stats: Mutex<Vec<(f64, usize)>>,
}

impl SequenceObjective for GrpoObjective<'_> {
    fn eval(&self, index: usize, logits: &[f64], vocab: usize, dlogits: &mut [f64]) -> f64 {
        let item = &self.items[index];
        let (eps, beta, tau, inv_n) = (self.eps, self.beta, self.tau, self.inv_tokens);
        let mut loss = 0.0;
        let mut kl_sum = 0.0;
        let mut clipped = 0;
        for (pos, (tok, (row, drow))) in item
            .tokens
            .flat()
            .zip(logits.chunks_exact(vocab).zip(dlogits.chunks_exact_mut(vocab)))
            .enumerate()
        {
            let tok = tok as usize;
            let lp = token_log_prob(row, tok, tau);
            let a = item.advantage;

            let log_ratio = clip_log_ratio(lp - item.old_log_probs[pos]);
            let ratio = log_ratio.exp();
            let clamped = ratio.clamp(1.0 - eps, 1.0 + eps);
            if clamped != ratio {
                clipped += 1;
            }
            let unclipped_term = ratio * a;
            let clipped_term = clamped * a;
            // d(−surrogate)/d lp; the clipped branch is flat in lp
            let mut dlp = if unclipped_term <= clipped_term {
                loss -= unclipped_term;
                -unclipped_term
            } else {
                loss -= clipped_term;
                0.0
            };

            let x = clip_log_ratio(item.ref_log_probs[pos] - lp);
            let k3 = x.exp() - x - 1.0;
            kl_sum += k3;
            loss += beta * k3;
            dlp += beta * (1.0 - x.exp());

            let g = dlp * inv_n / tau;
            let probs = tempered_probs(row, tau);
            for (j, (d, p)) in drow.iter_mut().zip(&probs).enumerate() {
                let ind = if j == tok { 1.0 } else { 0.0 };
                *d = g * (ind - p);
            }
        }
        self.stats.lock().expect("stats lock")[index] = (kl_sum, clipped);
        loss * inv_n
    }
}

/// Loss `−mean_tok(surrogate) + β·mean_tok(KL)` over the batch and its gradient.
pub fn grpo_loss_in<T: crate::linalg::Real>(
    policy: &Policy,
    params: &[T],
    items: &[LossItem<'_>],
    eps: f64,
    beta: f64,
    tau: f64,
) -> Result<(Vec<T>, LossStats)> {
    let total: usize = items.iter().map(|i| i.tokens.total_tokens()).sum();
    if total == 0 {
        return Err(Error::invalid("GRPO loss over an empty batch"));
    }
    for it in items {
        let n = it.tokens.total_tokens();
        if it.old_log_probs.len() != n || it.ref_log_probs.len() != n {
            return Err(Error::InvalidState(format!(
                "trajectory has {n} tokens but {} old and {} reference log-probs",
                it.old_log_probs.len(),
                it.ref_log_probs.len()
            )));
        }
        if !it.advantage.is_finite() {
            return Err(Error::Numeric("non-finite advantage".into()));
        }
    }
    let objective = GrpoObjective {
        items,
        eps,
        beta,
        tau,
        inv_tokens: 1.0 / total as f64,
        stats: Mutex::new(vec![(0.0, 0); items.len()]),
    };
    let batch: Vec<LabeledTokens<'_>> = items
        .iter()
        .map(|i| LabeledTokens {
            class: Some(i.class),
            tokens: i.tokens,
        })
        .collect();
    let (loss, grad) = policy.loss_and_grad_in(
        params,
        &LossSpec::Sequence {
            batch: &batch,
            objective: &objective,
        },
    )?;
    let per_item = objective.stats.into_inner().expect("stats lock");
    let stats = LossStats {
        loss,
        tokens: total,
        kl_sum: per_item.iter().map(|s| s.0).sum(),
        clipped: per_item.iter().map(|s| s.1).sum(),
    };
    Ok((grad, stats))
}

/// GRPO loss over trajectories with advantages set.
pub fn grpo_loss(
    policy: &Policy,
    params: &PolicyParams,
    batch: &[&Trajectory],
    ref_log_probs: &[&[f64]],
    config: &GRPOConfig,
) -> Result<(Vec<f32>, LossStats)> {
    if batch.len() != ref_log_probs.len() {
        return Err(Error::invalid("one reference log-prob vector per trajectory required"));
    }
    let items = batch
        .iter()
        .zip(ref_log_probs)
        .map(|(t, r)| {
            Ok(LossItem {
                class: t.class_label,
                tokens: &t.tokens,
                old_log_probs: &t.old_log_probs,
                ref_log_probs: r,
                advantage: t
                    .advantage
                    .ok_or_else(|| Error::InvalidState("trajectory without advantage".into()))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    grpo_loss_in(policy, params.values(), &items, config.clip_eps, config.beta, config.tau)
}

/// Adam moments, stored in `f32` like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    /// One bias-corrected Adam step on `params`.
    pub fn update(&mut self, params: &mut [f32], grad: &[f32], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..params.len() {
            let g = grad[i] as f64;
            let m = ADAM_BETA1 * self.m[i] as f64 + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * self.v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
            self.m[i] = m as f32;
            self.v[i] = v as f32;
            let step = lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
            params[i] = (params[i] as f64 - step) as f32;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    pub reward_mean: f64,
    pub reward_min: f64,
    pub reward_max: f64,
    pub kl_mean: f64,
    pub clip_frac: f64,
    pub loss: f64,
    pub adv_abs_mean: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: PolicyParams,
    params_ref: PolicyParams,
    pub iteration: usize,
    pub adam: AdamState,
    pub history: Vec<IterationMetrics>,
}

impl TrainState {
    /// Fresh state: θ and θ_ref both start at the pretrained weights.
    pub fn from_pretrained(params: PolicyParams) -> Self {
        let n = params.len();
        TrainState {
            params_ref: params.clone(),
            params,
            iteration: 0,
            adam: AdamState::new(n),
            history: Vec::new(),
        }
    }

    /// Rebuild a state saved mid-run.
    pub fn resume(params: PolicyParams, params_ref: PolicyParams, iteration: usize, adam: AdamState) -> Result<Self> {
        let n = params.len();
        if params_ref.len() != n || adam.m.len() != n || adam.v.len() != n {
            return Err(Error::invalid("parameter, reference and moment sizes differ"));
        }
        Ok(TrainState {
            params,
            params_ref,
            iteration,
            adam,
            history: Vec::new(),
        })
    }

    pub fn params_ref(&self) -> &PolicyParams {
        &self.params_ref
    }
}

/// Labels for iteration `iter`, uniform with replacement over the label set.
fn draw_labels(config: &GRPOConfig, set: &[usize], iter: usize) -> Vec<usize> {
    let mut rng = stream_rng(config.seed ^ LABEL_STREAM, iter as u64);
    (0..config.batch_labels)
        .map(|_| set[rng.random_range(0..set.len())])
        .collect()
}

/// One GRPO iteration. On error the state is left untouched.
pub fn train_iteration(
    policy: &Policy,
    state: &mut TrainState,
    config: &GRPOConfig,
    reward: &RewardSpec,
) -> Result<IterationMetrics> {
    let start = Instant::now();
    config.validate()?;
    let set = config.label_set(policy.config().n_classes)?;
    let iter = state.iteration;
    let old = state.params.clone();

    let labels = draw_labels(config, &set, iter);
    let mut trajs = Vec::with_capacity(labels.len() * config.group_size);
    for (j, &c) in labels.iter().enumerate() {
        let seed = stream_seed(config.seed ^ ROLLOUT_STREAM, (iter * config.batch_labels + j) as u64);
        trajs.extend(sample_group(policy, &old, c, config.group_size, config.tau, seed)?);
    }

    let images: Vec<_> = trajs.iter().map(|t| &t.image).collect();
    let rewards = reward.score_batch(&images).inspect_err(|e| {
        log::error!("iteration {iter} aborted: {e}");
    })?;
    for (group, rs) in trajs
        .chunks_mut(config.group_size)
        .zip(rewards.chunks(config.group_size))
    {
        let adv = compute_advantages(rs)?;
        for ((t, &r), a) in group.iter_mut().zip(rs).zip(adv) {
            t.reward = Some(r);
            t.advantage = Some(a);
        }
    }

    let ref_lp: Vec<Vec<f64>> = trajs
        .par_iter()
        .map(|t| Ok(policy.log_prob(&state.params_ref, Some(t.class_label), &t.tokens, config.tau)?.values().to_vec()))
        .collect::<Result<_>>()?;

    let mut params = state.params.clone();
    let mut adam = state.adam.clone();
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    let mut shuffle = stream_rng(config.seed ^ SHUFFLE_STREAM, iter as u64);
    let mut total = LossStats::default();
    let mut losses = Vec::new();
    for _ in 0..config.inner_epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(config.minibatch) {
            let items: Vec<LossItem<'_>> = chunk
                .iter()
                .map(|&i| LossItem {
                    class: trajs[i].class_label,
                    tokens: &trajs[i].tokens,
                    old_log_probs: &trajs[i].old_log_probs,
                    ref_log_probs: &ref_lp[i],
                    advantage: trajs[i].advantage.expect("set above"),
                })
                .collect();
            let (grad, stats) = grpo_loss_in(policy, params.values(), &items, config.clip_eps, config.beta, config.tau)?;
            adam.update(params.values_mut(), &grad, config.lr);
            total.tokens += stats.tokens;
            total.kl_sum += stats.kl_sum;
            total.clipped += stats.clipped;
            losses.push(stats.loss);
        }
    }
    if !params.is_finite() {
        return Err(Error::Numeric(format!("parameters became non-finite at iteration {iter}")));
    }

    let n = rewards.len() as f64;
    let metrics = IterationMetrics {
        iter,
        reward_mean: rewards.iter().sum::<f64>() / n,
        reward_min: rewards.iter().copied().fold(f64::INFINITY, f64::min),
        reward_max: rewards.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        kl_mean: total.kl_mean(),
        clip_frac: total.clip_frac(),
        loss: losses.iter().sum::<f64>() / losses.len() as f64,
        adv_abs_mean: trajs.iter().map(|t| t.advantage.unwrap_or(0.0).abs()).sum::<f64>() / n,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    state.params = params;
    state.adam = adam;
    state.iteration += 1;
    state.history.push(metrics.clone());
    Ok(metrics)
}

/// Run until `config.iterations` total iterations (counting resumed ones) or
/// the reward target. `on_iteration` sees the state after every iteration and
/// may persist it.
pub fn train<F>(
    policy: &Policy,
    state: &mut TrainState,
    config: &GRPOConfig,
    reward: &RewardSpec,
    mut on_iteration: F,
) -> Result<()>
where
    F: FnMut(&TrainState, &IterationMetrics) -> Result<()>,
{
    config.validate()?;
    reward.validate()?;
    while state.iteration < config.iterations {
        let m = train_iteration(policy, state, config, reward)?;
        log::info!(
            "iter {} reward {:.3} kl {:.4} clip {:.3} loss {:.4} ({} ms)",
            m.iter,
            m.reward_mean,
            m.kl_mean,
            m.clip_frac,
            m.loss,
            m.wall_ms
        );
        on_iteration(state, &m)?;
        if config.stop_at_reward.is_some_and(|t| m.reward_mean >= t) {
            break;
        }
    }
    Ok(())
}
