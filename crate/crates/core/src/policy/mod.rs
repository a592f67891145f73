//! Next-scale autoregressive policy `π(r_k | r_<k, c)`.
//!
//! One teacher-forced pass scores every token of every scale: rows of scale
//! block `k` see the class rows and all earlier blocks, plus each other, and
//! emit the logits for `r_k`. Tokens within a scale are predicted in parallel
//! from the previous scale's upsampled embedding map.
//!
//! The backward pass is written by hand (see `net`); [`Policy::loss_and_grad_in`]
//! runs in either `f32` or `f64` so finite-difference checks can use the same
//! code that trains.

pub mod layout;
mod net;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, Real};
use crate::msvq::{upsample, Codebook, MultiScaleTokens, ScaleSchedule, TokenGrid};

use layout::{InitKind, LayoutDims, ParamLayout};
use net::{NetInput, NetShape};

/// Missing fields take their [`PolicyConfig::desk`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub schedule: ScaleSchedule,
    pub vocab: usize,
    pub latent_dim: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_classes: usize,
    pub label_dropout_p: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PolicyConfig {
    /// 8 classes, 16×16 over five scales, V = 16, d_model 64, 3 layers, 4 heads.
    pub fn desk() -> Self {
        PolicyConfig {
            schedule: ScaleSchedule::square(&[1, 2, 4, 8, 16]).expect("static schedule"),
            vocab: 16,
            latent_dim: 3,
            d_model: 64,
            n_layers: 3,
            n_heads: 4,
            n_classes: 8,
            label_dropout_p: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.vocab < 2 {
            return bad(format!("vocab must be >= 2, got {}", self.vocab));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("d_model, n_heads and n_layers must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_classes == 0 {
            return bad("n_classes must be >= 1".into());
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.label_dropout_p) {
            return bad(format!("label_dropout_p {} outside [0, 1]", self.label_dropout_p));
        }
        Ok(())
    }
}

/// Flat vector of every learnable weight.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    values: Vec<f32>,
}

impl PolicyParams {
    pub fn from_values(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Unnormalised logits for every scale, `h_k·w_k × V` each, flattened in scale order.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsBundle {
    values: Vec<f32>,
    offsets: Vec<usize>,
    vocab: usize,
}

impl LogitsBundle {
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn num_scales(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Logits of scale `k`, one `V`-row per token.
    pub fn scale(&self, k: usize) -> &[f32] {
        &self.values[self.offsets[k] * self.vocab..self.offsets[k + 1] * self.vocab]
    }

    pub fn row(&self, position: usize) -> &[f32] {
        &self.values[position * self.vocab..(position + 1) * self.vocab]
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Per-token log-probabilities in scale order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenLogProbs {
    values: Vec<f64>,
    offsets: Vec<usize>,
}

impl TokenLogProbs {
    pub(crate) fn new(values: Vec<f64>, offsets: Vec<usize>) -> Self {
        Self { values, offsets }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn scale(&self, k: usize) -> &[f64] {
        &self.values[self.offsets[k]..self.offsets[k + 1]]
    }

    pub fn per_scale_sums(&self) -> Vec<f64> {
        (0..self.offsets.len() - 1)
            .map(|k| self.scale(k).iter().sum())
            .collect()
    }

    /// Sequence log-likelihood `Σ_k log p(r_k | r_<k)`.
    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// `log softmax(row / τ)[token]`, max-subtracted.
pub fn token_log_prob(row: &[f64], token: usize, tau: f64) -> f64 {
    let scaled: Vec<f64> = row.iter().map(|&z| z / tau).collect();
    scaled[token] - log_sum_exp(&scaled)
}

/// One teacher-forced sequence.
#[derive(Clone, Copy, Debug)]
pub struct LabeledTokens<'a> {
    pub class: Option<usize>,
    pub tokens: &'a MultiScaleTokens,
}

/// A loss defined per sequence on its logits.
pub trait SequenceObjective: Sync {
    /// Loss contribution of batch item `index`; writes `∂loss/∂logits` into `dlogits`.
    fn eval(&self, index: usize, logits: &[f64], vocab: usize, dlogits: &mut [f64]) -> f64;
}

pub enum LossSpec<'a> {
    /// Mean per-token cross-entropy at temperature 1 over the whole batch.
    CrossEntropy(&'a [LabeledTokens<'a>]),
    /// Caller-defined per-token objective (the GRPO loss lives in `grpo`).
    Sequence {
        batch: &'a [LabeledTokens<'a>],
        objective: &'a dyn SequenceObjective,
    },
    /// `Σ θ_i²`; exercises the plumbing without touching the network.
    ParamSquares,
}

struct CrossEntropy {
    inv_total: f64,
}

impl SequenceObjective for CrossEntropy {
    fn eval(&self, _index: usize, logits: &[f64], vocab: usize, dlogits: &mut [f64]) -> f64 {
        // dlogits arrives holding the one-hot targets
        let mut loss = 0.0;
        for (row, drow) in logits.chunks_exact(vocab).zip(dlogits.chunks_exact_mut(vocab)) {
            let target = drow.iter().position(|&v| v == 1.0).expect("one-hot target");
            let lse = log_sum_exp(row);
            loss -= row[target] - lse;
            for (g, &z) in drow.iter_mut().zip(row) {
                *g = ((z - lse).exp() - *g) * self.inv_total;
            }
        }
        loss * self.inv_total
    }
}

#[derive(Clone, Debug)]
pub struct Policy {
    config: PolicyConfig,
    codebook: Codebook,
    layout: ParamLayout,
    shape: NetShape,
}

impl Policy {
    pub fn new(config: PolicyConfig, codebook: Codebook) -> Result<Self> {
        config.validate()?;
        if codebook.vocab() != config.vocab || codebook.dim() != config.latent_dim {
            return Err(Error::invalid(format!(
                "codebook is {}×{}, policy expects {}×{}",
                codebook.vocab(),
                codebook.dim(),
                config.vocab,
                config.latent_dim
            )));
        }
        let layout = ParamLayout::new(&LayoutDims {
            n_classes: config.n_classes,
            latent_dim: config.latent_dim,
            num_scales: config.schedule.num_scales(),
            seq_len: config.schedule.total_tokens(),
            d_model: config.d_model,
            n_layers: config.n_layers,
            vocab: config.vocab,
        });
        let shape = NetShape {
            d: config.d_model,
            heads: config.n_heads,
            head_dim: config.d_model / config.n_heads,
            hidden: net::mlp_hidden(config.d_model),
            vocab: config.vocab,
            latent: config.latent_dim,
            offsets: config.schedule.offsets(),
        };
        Ok(Policy {
            config,
            codebook,
            layout,
            shape,
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn schedule(&self) -> &ScaleSchedule {
        &self.config.schedule
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn vocab(&self) -> usize {
        self.config.vocab
    }

    /// Scaled-normal weights, unit LayerNorm gains, zero biases.
    pub fn init_params(&self, seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.config.d_model as f64;
        let std_of = |kind: InitKind| match kind {
            InitKind::Embedding => 0.02,
            InitKind::FanIn => 1.0 / d.sqrt(),
            InitKind::Residual => 1.0 / (d * self.config.n_layers as f64).sqrt(),
            InitKind::Zero | InitKind::One => 0.0,
        };
        let mut values = vec![0.0f32; self.layout.total];
        for (_, seg, kind) in &self.layout.named {
            let out = &mut values[seg.range()];
            match kind {
                InitKind::Zero => {}
                InitKind::One => out.fill(1.0),
                _ => {
                    let normal = Normal::new(0.0, std_of(*kind)).expect("positive std");
                    for v in out.iter_mut() {
                        *v = normal.sample(&mut rng) as f32;
                    }
                }
            }
        }
        PolicyParams { values }
    }

    pub(crate) fn class_row(&self, class: Option<usize>) -> Result<usize> {
        match class {
            None => Ok(self.config.n_classes),
            Some(c) if c < self.config.n_classes => Ok(c),
            Some(c) => Err(Error::invalid(format!(
                "class {c} out of range for {} classes",
                self.config.n_classes
            ))),
        }
    }

    /// Conditioning maps for blocks `1..n_blocks` from the grids of scales `0..n_blocks-1`.
    fn conditioning<T: Real>(&self, grids: &[TokenGrid], n_blocks: usize) -> Result<Vec<T>> {
        let scales = self.config.schedule.scales();
        let mut cond = Vec::new();
        for k in 1..n_blocks {
            let (h, w) = scales[k];
            let up = upsample(&self.codebook.lookup(&grids[k - 1])?, h, w)?;
            cond.extend(up.data().iter().map(|&v| T::of(v)));
        }
        Ok(cond)
    }

    fn check_params<T>(&self, params: &[T]) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, policy needs {}",
                params.len(),
                self.layout.total
            )));
        }
        Ok(())
    }

    /// Teacher-forced logits for every position, in any precision.
    pub fn forward_in<T: Real>(
        &self,
        params: &[T],
        class: Option<usize>,
        tokens: &MultiScaleTokens,
    ) -> Result<Vec<T>> {
        self.check_params(params)?;
        tokens.validate(&self.config.schedule, self.config.vocab)?;
        let class_row = self.class_row(class)?;
        let n_blocks = self.config.schedule.num_scales();
        let cond = self.conditioning::<T>(tokens.grids(), n_blocks)?;
        let input = NetInput {
            class_row,
            cond: &cond,
            n_blocks,
        };
        Ok(net::forward(&self.layout, &self.shape, params, &input, false).0)
    }

    pub fn forward(
        &self,
        params: &PolicyParams,
        class: Option<usize>,
        tokens: &MultiScaleTokens,
    ) -> Result<LogitsBundle> {
        let values = self.forward_in(params.values(), class, tokens)?;
        Ok(LogitsBundle {
            values,
            offsets: self.config.schedule.offsets(),
            vocab: self.config.vocab,
        })
    }

    /// Logits for scale `n_blocks - 1` given the grids of all earlier scales.
    ///
    /// Only the prefix of the sequence is evaluated; by the block-causal mask
    /// the result equals the matching rows of a full pass.
    pub fn next_scale_logits<T: Real>(
        &self,
        params: &[T],
        class_row: usize,
        prefix: &[TokenGrid],
    ) -> Result<Vec<T>> {
        self.check_params(params)?;
        let n_blocks = prefix.len() + 1;
        if n_blocks > self.config.schedule.num_scales() {
            return Err(Error::invalid("prefix already covers every scale"));
        }
        let cond = self.conditioning::<T>(prefix, n_blocks)?;
        let input = NetInput {
            class_row,
            cond: &cond,
            n_blocks,
        };
        let logits = net::forward(&self.layout, &self.shape, params, &input, false).0;
        let start = self.shape.offsets[n_blocks - 1] * self.config.vocab;
        Ok(logits[start..].to_vec())
    }

    /// `log softmax(logits / τ)` at every realised token.
    pub fn log_prob(
        &self,
        params: &PolicyParams,
        class: Option<usize>,
        tokens: &MultiScaleTokens,
        tau: f64,
    ) -> Result<TokenLogProbs> {
        self.log_prob_in(params.values(), class, tokens, tau)
    }

    pub fn log_prob_in<T: Real>(
        &self,
        params: &[T],
        class: Option<usize>,
        tokens: &MultiScaleTokens,
        tau: f64,
    ) -> Result<TokenLogProbs> {
        if !(tau > 0.0) {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        let logits = self.forward_in(params, class, tokens)?;
        let v = self.config.vocab;
        let mut row = vec![0.0f64; v];
        let values = tokens
            .flat()
            .enumerate()
            .map(|(pos, tok)| {
                for (r, z) in row.iter_mut().zip(&logits[pos * v..(pos + 1) * v]) {
                    *r = z.as_f64();
                }
                token_log_prob(&row, tok as usize, tau)
            })
            .collect();
        Ok(TokenLogProbs::new(values, self.config.schedule.offsets()))
    }

    pub fn loss_and_grad(&self, params: &PolicyParams, spec: &LossSpec<'_>) -> Result<(f64, Vec<f32>)> {
        self.loss_and_grad_in(params.values(), spec)
    }

    /// Scalar loss and its exact gradient with respect to every parameter.
    ///
    /// Sequences are processed independently and their gradients summed in
    /// batch order, so the result does not depend on thread scheduling.
    pub fn loss_and_grad_in<T: Real>(&self, params: &[T], spec: &LossSpec<'_>) -> Result<(f64, Vec<T>)> {
        self.check_params(params)?;
        let (batch, ce, objective): (&[LabeledTokens<'_>], _, &dyn SequenceObjective) = match spec {
            LossSpec::ParamSquares => {
                let loss = params.iter().map(|v| v.as_f64() * v.as_f64()).sum();
                let grad = params.iter().map(|&v| v + v).collect();
                return Ok((loss, grad));
            }
            LossSpec::CrossEntropy(batch) => {
                let total: usize = batch.iter().map(|b| b.tokens.total_tokens()).sum();
                if total == 0 {
                    return Err(Error::invalid("cross-entropy over an empty batch"));
                }
                (batch, Some(CrossEntropy { inv_total: 1.0 / total as f64 }), &NOOP)
            }
            LossSpec::Sequence { batch, objective } => (batch, None, *objective),
        };
        let objective: &dyn SequenceObjective = match &ce {
            Some(c) => c,
            None => objective,
        };

        let parts: Vec<Result<(f64, Vec<T>)>> = batch
            .par_iter()
            .enumerate()
            .map(|(i, item)| self.sequence_grad(params, i, item, objective, ce.is_some()))
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![T::zero(); params.len()];
        for part in parts {
            let (l, g) = part?;
            loss += l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} over a batch of {} sequences",
                batch.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient entry".into()));
        }
        Ok((loss, grad))
    }

    fn sequence_grad<T: Real>(
        &self,
        params: &[T],
        index: usize,
        item: &LabeledTokens<'_>,
        objective: &dyn SequenceObjective,
        one_hot_targets: bool,
    ) -> Result<(f64, Vec<T>)> {
        item.tokens.validate(&self.config.schedule, self.config.vocab)?;
        let class_row = self.class_row(item.class)?;
        let n_blocks = self.config.schedule.num_scales();
        let cond = self.conditioning::<T>(item.tokens.grids(), n_blocks)?;
        let input = NetInput {
            class_row,
            cond: &cond,
            n_blocks,
        };
        let (logits, cache) = net::forward(&self.layout, &self.shape, params, &input, true);
        let v = self.config.vocab;
        let logits64: Vec<f64> = logits.iter().map(|z| z.as_f64()).collect();
        let mut dl = vec![0.0f64; logits.len()];
        if one_hot_targets {
            for (pos, tok) in item.tokens.flat().enumerate() {
                dl[pos * v + tok as usize] = 1.0;
            }
        }
        let loss = objective.eval(index, &logits64, v, &mut dl);
        let dlogits: Vec<T> = dl.iter().map(|&g| T::of(g)).collect();
        let mut grad = vec![T::zero(); params.len()];
        let cache = cache.expect("cache requested");
        net::backward(&self.layout, &self.shape, params, &input, &cache, &dlogits, &mut grad);
        Ok((loss, grad))
    }
}

struct Noop;

impl SequenceObjective for Noop {
    fn eval(&self, _: usize, _: &[f64], _: usize, dlogits: &mut [f64]) -> f64 {
        dlogits.fill(0.0);
        0.0
    }
}

static NOOP: Noop = Noop;

#[cfg(test)]
mod tests;
