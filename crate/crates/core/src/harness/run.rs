//! The work behind each CLI command, callable without a process boundary.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, SeedRecord};
use super::config::ExperimentConfig;
use super::plot::{line_chart, Panel, Series};
use crate::error::{Error, Result};
use crate::grpo::{train, GRPOConfig, IterationMetrics};
use crate::pretrain::{
    encode_dataset, gen_dataset, load_dataset, nearest_class, pretrain, sample_class, save_dataset, ClassSpec,
    DatasetConfig, EvalMetrics,
};
use crate::rewards::{brightness, RemoteScorer, RewardSpec};
use crate::sampler::{stream_seed, SamplerConfig};

pub const PRETRAINED_FILE: &str = "pretrained.ckpt";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const PRETRAIN_METRICS_FILE: &str = "pretrain_metrics.jsonl";
pub const CURVE_FILE: &str = "reward_curve.svg";
pub const SWEEP_SUMMARY_FILE: &str = "summary.json";
pub const SWEEP_PLOT_FILE: &str = "sweep.svg";
pub const RUN_CONFIG_FILE: &str = "config.json";

const HELD_OUT_STREAM: u64 = 0x6865_6c64;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Append-only JSON lines, flushed per record.
struct JsonLines {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let f = File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        Ok(JsonLines {
            path,
            out: BufWriter::new(f),
        })
    }

    fn push<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record).expect("record serialises");
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(format!("writing {}", self.path.display()), e))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<IterationMetrics>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::invalid(format!("{}: {e}", path.display()))))
        .collect()
}

pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub initial_loss: f64,
    pub evals: Vec<EvalMetrics>,
    pub reached_target: bool,
}

/// Held-out set drawn from an independent stream of the same class specs.
pub fn held_out_config(dataset: &DatasetConfig, n: usize) -> DatasetConfig {
    DatasetConfig {
        seed: stream_seed(dataset.seed, HELD_OUT_STREAM),
        samples_per_class: n.div_ceil(dataset.n_classes).max(1),
        ..dataset.clone()
    }
}

/// Generate (or load from `cache`) the dataset, pretrain, and write
/// `pretrained.ckpt` plus `pretrain_metrics.jsonl` into `out_dir`.
pub fn run_pretrain(cfg: &ExperimentConfig, out_dir: &Path, cache: Option<&Path>) -> Result<PretrainRun> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let policy = cfg.build_policy()?;
    let samples = match cache {
        Some(dir) if dir.join("index.json").exists() => load_dataset(dir)?,
        Some(dir) => {
            let s = gen_dataset(&cfg.dataset)?;
            save_dataset(dir, &s)?;
            s
        }
        None => gen_dataset(&cfg.dataset)?,
    };
    let train_set = encode_dataset(&samples, policy.schedule(), policy.codebook())?;
    let held = gen_dataset(&held_out_config(&cfg.dataset, cfg.pretrain.eval_samples))?;
    let held = encode_dataset(&held, policy.schedule(), policy.codebook())?;
    let specs = cfg.dataset.specs();

    let mut log = JsonLines::create(out_dir.join(PRETRAIN_METRICS_FILE))?;
    let outcome = pretrain(
        &policy,
        &train_set,
        &held,
        &cfg.pretrain,
        &cfg.sampler,
        &specs,
        cfg.pretrain.seed,
        |m| log.push(m),
    )?;
    let lineage = vec![
        SeedRecord {
            stage: "dataset".into(),
            seed: cfg.dataset.seed,
        },
        SeedRecord {
            stage: "codebook".into(),
            seed: cfg.codebook.seed,
        },
        SeedRecord {
            stage: "pretrain".into(),
            seed: cfg.pretrain.seed,
        },
    ];
    let checkpoint = Checkpoint::pretrained(&policy, outcome.params, lineage);
    checkpoint.save(&out_dir.join(PRETRAINED_FILE))?;
    Ok(PretrainRun {
        checkpoint,
        initial_loss: outcome.initial_loss,
        evals: outcome.evals,
        reached_target: outcome.reached_target,
    })
}

/// Fail fast when any remote scorer in `reward` does not answer.
pub fn probe_reward(reward: &RewardSpec) -> Result<()> {
    for leaf in reward.remote_leaves() {
        RemoteScorer::from_spec(leaf)?.probe()?;
    }
    Ok(())
}

pub fn curve_svg(history: &[IterationMetrics]) -> String {
    let series = |name: &str, f: fn(&IterationMetrics) -> f64| Panel {
        title: name.into(),
        series: vec![Series {
            name: name.into(),
            points: history.iter().map(|m| (m.iter as f64, f(m))).collect(),
        }],
    };
    line_chart(
        "iteration",
        &[series("reward_mean", |m| m.reward_mean), series("kl_mean", |m| m.kl_mean)],
    )
}

pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<IterationMetrics>,
}

/// GRPO from `input` until `grpo.iterations` total iterations, writing
/// `checkpoint.ckpt`, `metrics.jsonl` (one line per iteration run here) and
/// `reward_curve.svg`. A checkpoint already at the target is written back
/// unchanged. After a failure mid-run the last completed iteration is saved
/// before the error is returned.
pub fn run_train(
    grpo: &GRPOConfig,
    input: &Checkpoint,
    reward: &RewardSpec,
    out_dir: &Path,
) -> Result<TrainRun> {
    grpo.validate()?;
    reward.validate()?;
    probe_reward(reward)?;
    create_dir(out_dir)?;
    let policy = input.policy()?;
    let mut state = input.train_state()?;
    let mut log = JsonLines::create(out_dir.join(METRICS_FILE))?;
    let ck_path = out_dir.join(CHECKPOINT_FILE);
    if state.iteration >= grpo.iterations {
        input.save(&ck_path)?;
        write_file(&out_dir.join(CURVE_FILE), curve_svg(&[]))?;
        return Ok(TrainRun {
            checkpoint: input.clone(),
            history: Vec::new(),
        });
    }
    let mut base = input.clone();
    if input.adam.is_none() {
        base.seed_lineage.push(SeedRecord {
            stage: "grpo".into(),
            seed: grpo.seed,
        });
    }
    let result = train(&policy, &mut state, grpo, reward, |_, m| log.push(m));
    let checkpoint = base.with_state(&state);
    if result.is_ok() || !state.history.is_empty() {
        checkpoint.save(&ck_path)?;
        write_file(&out_dir.join(CURVE_FILE), curve_svg(&state.history))?;
    }
    result?;
    Ok(TrainRun {
        checkpoint,
        history: state.history,
    })
}

/// Write `n` samples of `class_id` as `{class}_{index}.ppm`.
pub fn run_sample(
    checkpoint: &Checkpoint,
    class_id: usize,
    n: usize,
    sampler: &SamplerConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let policy = checkpoint.policy()?;
    if class_id >= policy.config().n_classes {
        return Err(Error::invalid(format!(
            "class {class_id} out of range for {} classes",
            policy.config().n_classes
        )));
    }
    sampler.validate(policy.vocab())?;
    create_dir(out_dir)?;
    let images = sample_class(&policy, &checkpoint.params, class_id, n, sampler)?;
    images
        .iter()
        .enumerate()
        .map(|(i, im)| {
            let path = out_dir.join(format!("{class_id}_{i}.ppm"));
            write_file(&path, im.to_ppm())?;
            Ok(path)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub brightness_mean: f64,
    pub fidelity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_per_class: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub brightness_mean: f64,
    pub fidelity_mean: f64,
    pub per_class: Vec<ClassReport>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Inference samples per class, scored by `reward` and checked for class
/// fidelity against `specs`. Standard deviations are population values.
pub fn run_eval(
    checkpoint: &Checkpoint,
    reward: &RewardSpec,
    n_per_class: usize,
    sampler: &SamplerConfig,
    specs: &[ClassSpec],
) -> Result<EvalReport> {
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be >= 1"));
    }
    reward.validate()?;
    probe_reward(reward)?;
    let policy = checkpoint.policy()?;
    if specs.len() != policy.config().n_classes {
        return Err(Error::invalid("class specs do not match the checkpoint's class count"));
    }
    let mut all_rewards = Vec::new();
    let mut all_bright = Vec::new();
    let mut per_class = Vec::new();
    for c in 0..specs.len() {
        let images = sample_class(&policy, &checkpoint.params, c, n_per_class, sampler)?;
        let refs: Vec<_> = images.iter().collect();
        let rewards = reward.score_batch(&refs)?;
        let bright: Vec<f64> = images.iter().map(brightness).collect();
        let hits = images
            .iter()
            .filter(|im| nearest_class(im.mean_color(), specs) == c)
            .count();
        let (rm, rs) = mean_std(&rewards);
        per_class.push(ClassReport {
            class_id: c,
            reward_mean: rm,
            reward_std: rs,
            brightness_mean: mean_std(&bright).0,
            fidelity: hits as f64 / n_per_class as f64,
        });
        all_rewards.extend(rewards);
        all_bright.extend(bright);
    }
    let (reward_mean, reward_std) = mean_std(&all_rewards);
    let fidelity_mean = per_class.iter().map(|c| c.fidelity).sum::<f64>() / per_class.len() as f64;
    Ok(EvalReport {
        n_per_class,
        reward_mean,
        reward_std,
        brightness_mean: mean_std(&all_bright).0,
        fidelity_mean,
        per_class,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Beta,
    Groups,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Beta => "beta",
            SweepParam::Groups => "groups",
        }
    }
}

/// The base GRPO settings with one knob changed. Group sweeps keep the
/// number of trajectories per iteration fixed, so every value gets the same
/// sampling budget.
pub fn sweep_config(base: &GRPOConfig, param: SweepParam, value: f64) -> Result<GRPOConfig> {
    let mut cfg = base.clone();
    match param {
        SweepParam::Beta => cfg.beta = value,
        SweepParam::Groups => {
            if !(value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64) {
                return Err(Error::invalid(format!("group count must be a whole number, got {value}")));
            }
            let g = value as usize;
            let budget = base.batch_labels * base.group_size;
            cfg.group_size = g;
            cfg.batch_labels = budget.checked_div(g).unwrap_or(0).max(1);
            if g > 0 {
                cfg.minibatch = base.minibatch.min(cfg.batch_labels * g);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_dir_name(param: SweepParam, value: f64) -> String {
    format!("{}_{value}", param.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub ok: bool,
    pub error: Option<String>,
    pub iterations: usize,
    pub final_reward_mean: Option<f64>,
    pub final_kl_mean: Option<f64>,
    pub metrics_file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
    /// Whether final reward never decreases along the successful rows.
    pub reward_monotonic: bool,
}

/// Row for a finished run directory; failures keep their message.
pub fn sweep_row(value: f64, dir: &Path, failure: Option<String>) -> SweepRow {
    let metrics_file = format!("{}/{METRICS_FILE}", dir.file_name().map(|n| n.to_string_lossy()).unwrap_or_default());
    let history = read_metrics(&dir.join(METRICS_FILE));
    let (error, history) = match (failure, history) {
        (Some(e), h) => (Some(e), h.unwrap_or_default()),
        (None, Ok(h)) => (None, h),
        (None, Err(e)) => (Some(e.to_string()), Vec::new()),
    };
    let last = history.last();
    SweepRow {
        value,
        ok: error.is_none(),
        error,
        iterations: history.len(),
        final_reward_mean: last.map(|m| m.reward_mean),
        final_kl_mean: last.map(|m| m.kl_mean),
        metrics_file,
    }
}

/// Write `summary.json` and `sweep.svg` for finished runs under `out_dir`.
pub fn finish_sweep(param: SweepParam, rows: Vec<SweepRow>, out_dir: &Path) -> Result<SweepSummary> {
    let finals: Vec<f64> = rows.iter().filter(|r| r.ok).filter_map(|r| r.final_reward_mean).collect();
    let summary = SweepSummary {
        param,
        reward_monotonic: finals.windows(2).all(|w| w[1] >= w[0]),
        rows,
    };
    let mut reward = Vec::new();
    let mut kl = Vec::new();
    for r in summary.rows.iter().filter(|r| r.ok) {
        let dir = out_dir.join(run_dir_name(param, r.value));
        let h = read_metrics(&dir.join(METRICS_FILE)).unwrap_or_default();
        let name = format!("{} = {}", param.name(), r.value);
        reward.push(Series {
            name: name.clone(),
            points: h.iter().map(|m| (m.iter as f64, m.reward_mean)).collect(),
        });
        kl.push(Series {
            name,
            points: h.iter().map(|m| (m.iter as f64, m.kl_mean)).collect(),
        });
    }
    let svg = line_chart(
        "iteration",
        &[
            Panel {
                title: "reward_mean".into(),
                series: reward,
            },
            Panel {
                title: "kl_mean".into(),
                series: kl,
            },
        ],
    );
    write_file(&out_dir.join(SWEEP_PLOT_FILE), svg)?;
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write_file(&out_dir.join(SWEEP_SUMMARY_FILE), text + "\n")?;
    Ok(summary)
}

/// One GRPO run per value, in order, each in `{param}_{value}/`. A failing
/// value is recorded and the sweep moves on.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    input: &Checkpoint,
    param: SweepParam,
    values: &[f64],
    out_dir: &Path,
) -> Result<SweepSummary> {
    if values.is_empty() {
        return Err(Error::invalid("sweep needs at least one value"));
    }
    create_dir(out_dir)?;
    let mut rows = Vec::with_capacity(values.len());
    for &v in values {
        let dir = out_dir.join(run_dir_name(param, v));
        create_dir(&dir)?;
        let outcome = sweep_config(&cfg.grpo, param, v).and_then(|grpo| {
            let run_cfg = ExperimentConfig {
                grpo: grpo.clone(),
                ..cfg.clone()
            };
            write_file(&dir.join(RUN_CONFIG_FILE), run_cfg.to_json() + "\n")?;
            run_train(&grpo, input, &cfg.reward, &dir).map(|_| ())
        });
        if let Err(e) = &outcome {
            log::warn!("{} = {v} failed: {e}", param.name());
        }
        rows.push(sweep_row(v, &dir, outcome.err().map(|e| e.to_string())));
    }
    finish_sweep(param, rows, out_dir)
}

#[cfg(test)]
mod tests;
