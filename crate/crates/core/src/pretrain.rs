//! Synthetic class-conditional images and teacher-forced pretraining.
//!
//! Each class has a base colour on the corners of the `{0.2, 0.8}³` cube and
//! a pattern whose mean equals the base colour. A small share of samples is
//! over- or under-exposed so the pretrained model puts some mass on very bright
//! and very dark images, which is what the brightness rewards select for.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::AdamState;
use crate::msvq::{encode, Codebook, Image, MultiScaleTokens, ScaleSchedule};
use crate::policy::{LabeledTokens, LossSpec, Policy, PolicyParams};
use crate::sampler::{sample_inference, stream_rng, stream_seed, SamplerConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Solid,
    HorizontalGradient,
    VerticalGradient,
    Checker,
}

const PATTERNS: [Pattern; 4] = [
    Pattern::Solid,
    Pattern::HorizontalGradient,
    Pattern::VerticalGradient,
    Pattern::Checker,
];

const GRADIENT_AMP: f64 = 0.15;
const CHECKER_AMP: f64 = 0.12;
const CHECKER_CELL: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub base_color: [f64; 3],
    pub pattern: Pattern,
    pub noise_amp: f64,
}

/// Class `id` under dataset `seed`. The first eight classes are the cube
/// corners in binary order (black, blue, green, …, white); later ones get
/// seeded random colours.
pub fn class_spec(class_id: usize, seed: u64, noise_amp: f64) -> ClassSpec {
    let base_color = if class_id < 8 {
        let bit = |b: usize| if class_id >> b & 1 == 1 { 0.8 } else { 0.2 };
        [bit(2), bit(1), bit(0)]
    } else {
        let mut rng = stream_rng(seed, class_id as u64);
        [0, 1, 2].map(|_| rng.random_range(0.2..=0.8))
    };
    ClassSpec {
        class_id,
        base_color,
        pattern: PATTERNS[class_id % PATTERNS.len()],
        noise_amp,
    }
}

pub fn class_specs(n_classes: usize, seed: u64, noise_amp: f64) -> Vec<ClassSpec> {
    (0..n_classes).map(|c| class_spec(c, seed, noise_amp)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exposure {
    Normal,
    /// `0.9 + 0.1·x`
    Over,
    /// `0.1·x`
    Under,
}

/// Pattern plus uniform noise, clamped, then the exposure transform.
pub fn render<R: Rng + ?Sized>(spec: &ClassSpec, h: usize, w: usize, exposure: Exposure, rng: &mut R) -> Image {
    let mut px = Vec::with_capacity(h * w * 3);
    let ramp = |i: usize, n: usize| {
        if n > 1 {
            GRADIENT_AMP * (2.0 * i as f64 / (n - 1) as f64 - 1.0)
        } else {
            0.0
        }
    };
    for i in 0..h {
        for j in 0..w {
            let offset = match spec.pattern {
                Pattern::Solid => 0.0,
                Pattern::HorizontalGradient => ramp(j, w),
                Pattern::VerticalGradient => ramp(i, h),
                Pattern::Checker => {
                    if (i / CHECKER_CELL + j / CHECKER_CELL) % 2 == 0 {
                        CHECKER_AMP
                    } else {
                        -CHECKER_AMP
                    }
                }
            };
            for c in 0..3 {
                let noise = if spec.noise_amp > 0.0 {
                    rng.random_range(-spec.noise_amp..=spec.noise_amp)
                } else {
                    0.0
                };
                let v = (spec.base_color[c] + offset + noise).clamp(0.0, 1.0);
                px.push(match exposure {
                    Exposure::Normal => v,
                    Exposure::Over => 0.9 + 0.1 * v,
                    Exposure::Under => 0.1 * v,
                });
            }
        }
    }
    Image::new(h, w, px).expect("dimensions match")
}

fn d_classes() -> usize {
    8
}
fn d_per_class() -> usize {
    500
}
fn d_noise() -> f64 {
    0.05
}
fn d_exposure() -> f64 {
    0.1
}
fn d_side() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default = "d_classes")]
    pub n_classes: usize,
    #[serde(default = "d_per_class")]
    pub samples_per_class: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_noise")]
    pub noise_amp: f64,
    /// Probability of over-exposure, and separately of under-exposure.
    #[serde(default = "d_exposure")]
    pub exposure_p: f64,
    #[serde(default = "d_side")]
    pub height: usize,
    #[serde(default = "d_side")]
    pub width: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::invalid(format!("n_classes must be >= 2, got {}", self.n_classes)));
        }
        if !(0.0..=0.5).contains(&self.exposure_p) {
            return Err(Error::invalid(format!("exposure_p must lie in [0, 0.5], got {}", self.exposure_p)));
        }
        if !(self.noise_amp >= 0.0 && self.noise_amp.is_finite()) {
            return Err(Error::invalid("noise_amp must be >= 0"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::invalid("image size must be positive"));
        }
        Ok(())
    }

    pub fn specs(&self) -> Vec<ClassSpec> {
        class_specs(self.n_classes, self.seed, self.noise_amp)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub class_id: usize,
    pub image: Image,
}

/// Samples in class-major order; sample `i` of class `c` has its own stream.
pub fn gen_dataset(config: &DatasetConfig) -> Result<Vec<Sample>> {
    config.validate()?;
    let specs = config.specs();
    let n = config.samples_per_class;
    Ok((0..config.n_classes * n)
        .into_par_iter()
        .map(|idx| {
            let spec = &specs[idx / n];
            let mut rng = stream_rng(config.seed, idx as u64);
            let u: f64 = rng.random();
            let exposure = if u < config.exposure_p {
                Exposure::Over
            } else if u < 2.0 * config.exposure_p {
                Exposure::Under
            } else {
                Exposure::Normal
            };
            Sample {
                class_id: spec.class_id,
                image: render(spec, config.height, config.width, exposure, &mut rng),
            }
        })
        .collect())
}

pub fn encode_dataset(
    samples: &[Sample],
    schedule: &ScaleSchedule,
    codebook: &Codebook,
) -> Result<Vec<(usize, MultiScaleTokens)>> {
    samples
        .par_iter()
        .map(|s| Ok((s.class_id, encode(&s.image, schedule, codebook)?)))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    class_id: usize,
    file: String,
}

/// Write `index.json` plus one PPM per sample.
pub fn save_dataset(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut index = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let file = format!("{i:06}_c{}.ppm", s.class_id);
        let path = dir.join(&file);
        fs::write(&path, s.image.to_ppm()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        index.push(IndexEntry {
            class_id: s.class_id,
            file,
        });
    }
    let path = dir.join("index.json");
    let text = serde_json::to_string_pretty(&index).expect("index serialises");
    fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join("index.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let index: Vec<IndexEntry> = serde_json::from_str(&text)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    index
        .into_iter()
        .map(|e| {
            let p = dir.join(&e.file);
            let bytes = fs::read(&p).map_err(|err| Error::io(format!("reading {}", p.display()), err))?;
            Ok(Sample {
                class_id: e.class_id,
                image: Image::from_ppm(&bytes)?,
            })
        })
        .collect()
}

/// Index of the class whose base colour is nearest (Euclidean) to `color`;
/// ties go to the lower index.
pub fn nearest_class(color: [f64; 3], specs: &[ClassSpec]) -> usize {
    let d2 = |s: &ClassSpec| (0..3).map(|c| (color[c] - s.base_color[c]).powi(2)).sum::<f64>();
    let mut best = 0;
    for (i, s) in specs.iter().enumerate() {
        if d2(s) < d2(&specs[best]) {
            best = i;
        }
    }
    best
}

/// Fraction of images whose mean colour is nearest to `class_id`'s base colour.
pub fn fidelity_of(images: &[Image], class_id: usize, specs: &[ClassSpec]) -> f64 {
    if images.is_empty() {
        return 0.0;
    }
    let hits = images
        .iter()
        .filter(|im| nearest_class(im.mean_color(), specs) == class_id)
        .count();
    hits as f64 / images.len() as f64
}

/// Inference samples for `class_id`; sample `i` uses seed `stream_seed(config.seed, i)`.
pub fn sample_class(
    policy: &Policy,
    params: &PolicyParams,
    class_id: usize,
    n_samples: usize,
    config: &SamplerConfig,
) -> Result<Vec<Image>> {
    (0..n_samples)
        .into_par_iter()
        .map(|i| {
            let cfg = SamplerConfig {
                seed: stream_seed(config.seed, i as u64),
                ..config.clone()
            };
            Ok(sample_inference(policy, params, class_id, &cfg)?.1)
        })
        .collect()
}

pub fn class_fidelity(
    policy: &Policy,
    params: &PolicyParams,
    class_id: usize,
    n_samples: usize,
    config: &SamplerConfig,
    specs: &[ClassSpec],
) -> Result<f64> {
    Ok(fidelity_of(&sample_class(policy, params, class_id, n_samples, config)?, class_id, specs))
}

/// Fidelity averaged over every class.
pub fn mean_class_fidelity(
    policy: &Policy,
    params: &PolicyParams,
    n_per_class: usize,
    config: &SamplerConfig,
    specs: &[ClassSpec],
) -> Result<f64> {
    let mut total = 0.0;
    for c in 0..specs.len() {
        total += class_fidelity(policy, params, c, n_per_class, config, specs)?;
    }
    Ok(total / specs.len() as f64)
}

fn d_epochs() -> usize {
    20
}
fn d_pre_lr() -> f64 {
    3e-3
}
fn d_batch() -> usize {
    16
}
fn d_eval_samples() -> usize {
    256
}
fn d_fidelity_samples() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_pre_lr")]
    pub lr: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Overrides the policy's own label dropout when set.
    #[serde(default)]
    pub label_dropout_p: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Optimiser steps between evaluations; once per epoch when absent.
    #[serde(default)]
    pub eval_every: Option<usize>,
    /// Held-out sequences scored at each evaluation.
    #[serde(default = "d_eval_samples")]
    pub eval_samples: usize,
    /// Inference samples per class for the fidelity estimate.
    #[serde(default = "d_fidelity_samples")]
    pub fidelity_samples: usize,
    /// Stop once held-out loss is below this value …
    #[serde(default)]
    pub target_loss: Option<f64>,
    /// … and mean class fidelity is at least this value.
    #[serde(default)]
    pub target_fidelity: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if let Some(p) = self.label_dropout_p {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("label_dropout_p {p} outside [0, 1]")));
            }
        }
        if self.eval_every == Some(0) {
            return Err(Error::invalid("eval_every must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub step: usize,
    pub epoch: f64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub fidelity: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: PolicyParams,
    pub initial_loss: f64,
    pub evals: Vec<EvalMetrics>,
    pub reached_target: bool,
}

/// Mean per-token cross-entropy (temperature 1) with true labels.
pub fn eval_loss(policy: &Policy, params: &PolicyParams, data: &[(usize, MultiScaleTokens)]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in data.chunks(64) {
        let batch: Vec<LabeledTokens<'_>> = chunk
            .iter()
            .map(|(c, t)| LabeledTokens {
                class: Some(*c),
                tokens: t,
            })
            .collect();
        let per: Vec<Result<(f64, usize)>> = batch
            .par_iter()
            .map(|item| {
                let lp = policy.log_prob(params, item.class, item.tokens, 1.0)?;
                Ok((-lp.total(), lp.values().len()))
            })
            .collect();
        for p in per {
            let (l, n) = p?;
            total += l;
            tokens += n;
        }
    }
    if tokens == 0 {
        return Err(Error::invalid("empty evaluation set"));
    }
    Ok(total / tokens as f64)
}

/// Adam on mean token cross-entropy with label dropout.
///
/// `on_eval` runs after every evaluation; returning an error aborts training.
pub fn pretrain<F>(
    policy: &Policy,
    train: &[(usize, MultiScaleTokens)],
    held_out: &[(usize, MultiScaleTokens)],
    config: &PretrainConfig,
    sampler: &SamplerConfig,
    specs: &[ClassSpec],
    init_seed: u64,
    mut on_eval: F,
) -> Result<PretrainOutcome>
where
    F: FnMut(&EvalMetrics) -> Result<()>,
{
    config.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty dataset"));
    }
    let held_out = if held_out.is_empty() { train } else { held_out };
    let held_out = &held_out[..config.eval_samples.clamp(1, held_out.len())];
    let dropout = config.label_dropout_p.unwrap_or(policy.config().label_dropout_p);
    let start = Instant::now();

    let mut params = policy.init_params(init_seed);
    let initial_loss = eval_loss(policy, &params, held_out)?;
    let mut adam = AdamState::new(params.len());
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let eval_every = config.eval_every.unwrap_or(steps_per_epoch);
    let mut evals = Vec::new();
    let mut step = 0usize;
    let mut running = (0.0, 0usize);
    let mut reached = false;

    'outer: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream_rng(config.seed, epoch as u64));
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed ^ 0x64726f70, step as u64));
            let batch: Vec<LabeledTokens<'_>> = chunk
                .iter()
                .map(|&i| LabeledTokens {
                    class: if rng.random::<f64>() < dropout { None } else { Some(train[i].0) },
                    tokens: &train[i].1,
                })
                .collect();
            let (loss, grad) = policy.loss_and_grad(&params, &LossSpec::CrossEntropy(&batch))?;
            adam.update(params.values_mut(), &grad, config.lr);
            step += 1;
            running.0 += loss;
            running.1 += 1;

            let last = epoch + 1 == config.epochs && b + 1 == steps_per_epoch;
            if step % eval_every == 0 || last {
                let eval = eval_loss(policy, &params, held_out)?;
                let fidelity = match config.target_fidelity {
                    Some(_) => Some(mean_class_fidelity(policy, &params, config.fidelity_samples, sampler, specs)?),
                    None => None,
                };
                let m = EvalMetrics {
                    step,
                    epoch: step as f64 / steps_per_epoch as f64,
                    train_loss: running.0 / running.1 as f64,
                    eval_loss: eval,
                    fidelity,
                    wall_ms: start.elapsed().as_millis() as u64,
                };
                log::info!(
                    "step {} epoch {:.2} train {:.4} eval {:.4} fidelity {:?}",
                    m.step,
                    m.epoch,
                    m.train_loss,
                    m.eval_loss,
                    m.fidelity
                );
                running = (0.0, 0);
                on_eval(&m)?;
                let loss_ok = config.target_loss.is_none_or(|t| m.eval_loss < t);
                let fid_ok = match (config.target_fidelity, m.fidelity) {
                    (Some(t), Some(f)) => f >= t,
                    _ => true,
                };
                let has_target = config.target_loss.is_some() || config.target_fidelity.is_some();
                evals.push(m);
                if has_target && loss_ok && fid_ok {
                    reached = true;
                    break 'outer;
                }
            }
        }
    }
    Ok(PretrainOutcome {
        params,
        initial_loss,
        evals,
        reached_target: reached,
    })
}
