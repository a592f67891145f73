//! Scale-by-scale rollouts.
//!
//! Training rollouts draw from the plain temperature softmax of the policy and
//! record per-token log-probs. Inference rollouts add classifier-free guidance
//! and top-k/top-p filtering. Every trajectory owns its own random stream, so
//! a group can be sampled in any order or in parallel with identical results.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_sum_exp;
use crate::msvq::{decode, Image, MultiScaleTokens, TokenGrid};
use crate::policy::{token_log_prob, Policy, PolicyParams};

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub class_label: usize,
    pub tokens: MultiScaleTokens,
    /// `log π_old(token)` at temperature τ, in flattened scale order.
    pub old_log_probs: Vec<f64>,
    pub image: Image,
    pub reward: Option<f64>,
    pub advantage: Option<f64>,
}

fn default_tau() -> f64 {
    0.7
}

fn default_cfg() -> f64 {
    1.5
}

fn default_top_p() -> Option<f64> {
    Some(0.95)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_cfg")]
    pub cfg_scale: f64,
    /// `None` keeps the whole vocabulary.
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default = "default_top_p")]
    pub top_p: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            tau: default_tau(),
            cfg_scale: default_cfg(),
            top_k: None,
            top_p: default_top_p(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        check_tau(self.tau)?;
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::invalid(format!("cfg_scale must be >= 0, got {}", self.cfg_scale)));
        }
        match self.top_k {
            Some(0) => return Err(Error::invalid("top_k must be >= 1")),
            Some(k) if k > vocab => {
                return Err(Error::invalid(format!("top_k {k} exceeds vocabulary {vocab}")))
            }
            _ => {}
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::invalid(format!("top_p must lie in (0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of stream `index` under `seed`.
pub fn stream_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, index))
}

/// `softmax(logits / τ)` in f64.
pub fn tempered_probs(logits: &[f64], tau: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|z| z / tau).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|z| (z - lse).exp()).collect()
}

/// Inverse-CDF draw from a distribution; never returns a zero-mass index.
pub fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// `uncond + s·(cond − uncond)`.
pub fn apply_cfg(cond: &[f64], uncond: &[f64], s: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::invalid(format!(
            "cfg logits differ in length: {} vs {}",
            cond.len(),
            uncond.len()
        )));
    }
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| u + s * (c - u)).collect())
}

/// Keep the `top_k` largest probabilities, then the smallest prefix of the
/// survivors (in descending order) whose mass reaches `top_p`, and renormalise.
/// Ties go to the lower index.
pub fn filter_top_k_top_p(probs: &[f64], top_k: Option<usize>, top_p: Option<f64>) -> Result<Vec<f64>> {
    if probs.is_empty() {
        return Err(Error::invalid("empty distribution"));
    }
    if top_k == Some(0) {
        return Err(Error::invalid("top_k must be >= 1"));
    }
    if let Some(p) = top_p {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid(format!("top_p must lie in (0, 1], got {p}")));
        }
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let k = top_k.unwrap_or(probs.len()).min(probs.len());
    let kept_mass: f64 = order[..k].iter().map(|&i| probs[i]).sum();
    let mut keep = k;
    if let Some(p) = top_p {
        let mut acc = 0.0;
        for (n, &i) in order[..k].iter().enumerate() {
            acc += probs[i] / kept_mass;
            if acc >= p - 1e-12 {
                keep = n + 1;
                break;
            }
        }
    }
    let mass: f64 = order[..keep].iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; probs.len()];
    for &i in &order[..keep] {
        out[i] = probs[i] / mass;
    }
    Ok(out)
}

fn rollout(
    policy: &Policy,
    params: &PolicyParams,
    class_label: usize,
    tau: f64,
    mut rng: ChaCha8Rng,
) -> Result<Trajectory> {
    let class_row = policy.class_row(Some(class_label))?;
    let v = policy.vocab();
    let mut grids: Vec<TokenGrid> = Vec::with_capacity(policy.schedule().num_scales());
    let mut old_log_probs = Vec::with_capacity(policy.schedule().total_tokens());
    let mut row = vec![0.0f64; v];
    for &(h, w) in policy.schedule().scales() {
        let logits = policy.next_scale_logits(params.values(), class_row, &grids)?;
        let mut values = Vec::with_capacity(h * w);
        for chunk in logits.chunks_exact(v) {
            for (r, &z) in row.iter_mut().zip(chunk) {
                *r = z as f64;
            }
            if row.iter().any(|z| !z.is_finite()) {
                return Err(Error::Numeric("non-finite logits during rollout".into()));
            }
            let tok = draw(&tempered_probs(&row, tau), &mut rng);
            old_log_probs.push(token_log_prob(&row, tok, tau));
            values.push(tok as u32);
        }
        grids.push(TokenGrid::new(h, w, values)?);
    }
    let tokens = MultiScaleTokens::new(grids);
    let image = decode(&tokens, policy.schedule(), policy.codebook())?;
    Ok(Trajectory {
        class_label,
        tokens,
        old_log_probs,
        image,
        reward: None,
        advantage: None,
    })
}

/// `g` training rollouts of one class under the frozen `params`.
///
/// Trajectory `i` uses stream `stream_seed(seed, i)`.
pub fn sample_group(
    policy: &Policy,
    params: &PolicyParams,
    class_label: usize,
    g: usize,
    tau: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if g == 0 {
        return Err(Error::invalid("group size must be >= 1"));
    }
    check_tau(tau)?;
    policy.class_row(Some(class_label))?;
    (0..g)
        .into_par_iter()
        .map(|i| rollout(policy, params, class_label, tau, stream_rng(seed, i as u64)))
        .collect()
}

/// Guided, filtered sample for display and evaluation.
pub fn sample_inference(
    policy: &Policy,
    params: &PolicyParams,
    class_label: usize,
    config: &SamplerConfig,
) -> Result<(MultiScaleTokens, Image)> {
    config.validate(policy.vocab())?;
    let cond_row = policy.class_row(Some(class_label))?;
    let null_row = policy.class_row(None)?;
    let v = policy.vocab();
    let mut rng = stream_rng(config.seed, class_label as u64);
    let mut grids: Vec<TokenGrid> = Vec::with_capacity(policy.schedule().num_scales());
    for &(h, w) in policy.schedule().scales() {
        let cond = policy.next_scale_logits(params.values(), cond_row, &grids)?;
        let uncond = policy.next_scale_logits(params.values(), null_row, &grids)?;
        let mut values = Vec::with_capacity(h * w);
        for (c, u) in cond.chunks_exact(v).zip(uncond.chunks_exact(v)) {
            let c: Vec<f64> = c.iter().map(|&z| z as f64).collect();
            let u: Vec<f64> = u.iter().map(|&z| z as f64).collect();
            let guided = apply_cfg(&c, &u, config.cfg_scale)?;
            if guided.iter().any(|z| !z.is_finite()) {
                return Err(Error::Numeric("non-finite guided logits".into()));
            }
            let probs = filter_top_k_top_p(&tempered_probs(&guided, config.tau), config.top_k, config.top_p)?;
            values.push(draw(&probs, &mut rng) as u32);
        }
        grids.push(TokenGrid::new(h, w, values)?);
    }
    let tokens = MultiScaleTokens::new(grids);
    let image = decode(&tokens, policy.schedule(), policy.codebook())?;
    Ok((tokens, image))
}
