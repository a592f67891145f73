use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode, Stdio};

use clap::{Parser, Subcommand, ValueEnum};

use scalegrpo::harness::run::{
    finish_sweep, run_dir_name, run_eval, run_pretrain, run_sample, run_sweep, run_train, sweep_config, sweep_row,
    SweepParam, RUN_CONFIG_FILE,
};
use scalegrpo::harness::{exit_code, Checkpoint, ExperimentConfig};
use scalegrpo::rewards::{RemoteReward, RemoteSpec, RewardSpec};
use scalegrpo::{Error, Result};

#[derive(Parser)]
#[command(name = "scalegrpo", version, about = "GRPO fine-tuning of a small next-scale image model")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and pretrain the reference policy.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/pretrain")]
        out: PathBuf,
        /// Directory of PPM files plus index.json; created when missing.
        #[arg(long)]
        dataset_cache: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint with GRPO.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pretrained: PathBuf,
        /// bright, dark, remote, composite, or an inline JSON reward spec.
        #[arg(long)]
        reward: Option<String>,
        /// Scorer base URL for remote rewards.
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Draw class-conditional samples as PPM files.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        class: usize,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        cfg: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// One GRPO run per value of a hyperparameter.
    Sweep {
        #[arg(long, value_enum)]
        param: ParamArg,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        reward: Option<String>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Run every value in its own process at once.
        #[arg(long)]
        parallel: bool,
        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
    /// Reward and class-fidelity report for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        reward: Option<String>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long, default_value_t = 10)]
        n_per_class: usize,
        /// Report path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ParamArg {
    Beta,
    Groups,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn set_endpoint(spec: &mut RewardSpec, endpoint: &str) {
    match spec {
        RewardSpec::Remote(r) => r.endpoint = Some(endpoint.to_string()),
        RewardSpec::WeightedSum { components } => {
            for c in components {
                set_endpoint(&mut c.spec, endpoint);
            }
        }
        _ => {}
    }
}

/// `--reward` keyword or inline JSON, falling back to the config's reward.
fn select_reward(choice: Option<&str>, cfg: &ExperimentConfig, endpoint: Option<&str>) -> Result<RewardSpec> {
    let mut spec = match choice {
        None => cfg.reward.clone(),
        Some("bright") => match cfg.reward {
            RewardSpec::BrightThreshold { .. } => cfg.reward.clone(),
            _ => RewardSpec::bright(),
        },
        Some("dark") => match cfg.reward {
            RewardSpec::DarkThreshold { .. } => cfg.reward.clone(),
            _ => RewardSpec::dark(),
        },
        Some("remote") => match cfg.reward {
            RewardSpec::Remote(_) => cfg.reward.clone(),
            _ => RewardSpec::Remote(RemoteSpec {
                endpoint: None,
                reward: RemoteReward::Aesthetic,
                prompt: None,
                timeout_ms: 30_000,
                max_in_flight: 4,
            }),
        },
        Some("composite") => match cfg.reward {
            RewardSpec::WeightedSum { .. } => cfg.reward.clone(),
            _ => {
                return Err(Error::Config {
                    path: "reward".into(),
                    message: "--reward composite needs a weighted_sum reward in the config".into(),
                })
            }
        },
        Some(text) if text.trim_start().starts_with('{') => {
            serde_json::from_str(text).map_err(|e| Error::Config {
                path: "--reward".into(),
                message: e.to_string(),
            })?
        }
        Some(other) => {
            return Err(Error::Config {
                path: "--reward".into(),
                message: format!("unknown reward `{other}`"),
            })
        }
    };
    if let Some(e) = endpoint {
        set_endpoint(&mut spec, e);
    }
    spec.validate()?;
    Ok(spec)
}

fn write_out(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Io {
            context: format!("creating {}", parent.display()),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn sweep_parallel(
    cfg: &ExperimentConfig,
    pretrained: &Path,
    param: SweepParam,
    values: &[f64],
    out: &Path,
) -> Result<()> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one value".into()));
    }
    let exe = std::env::current_exe().map_err(|e| Error::Io {
        context: "locating the scalegrpo binary".into(),
        source: e,
    })?;
    let mut children = Vec::new();
    for &v in values {
        let dir = out.join(run_dir_name(param, v));
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            context: format!("creating {}", dir.display()),
            source: e,
        })?;
        let child = sweep_config(&cfg.grpo, param, v).and_then(|grpo| {
            let run_cfg = ExperimentConfig {
                grpo,
                ..cfg.clone()
            };
            let cfg_path = dir.join(RUN_CONFIG_FILE);
            write_out(&cfg_path, &(run_cfg.to_json() + "\n"))?;
            Command::new(&exe)
                .arg("train")
                .arg("--config")
                .arg(&cfg_path)
                .arg("--pretrained")
                .arg(pretrained)
                .arg("--out")
                .arg(&dir)
                .stdout(Stdio::null())
                .spawn()
                .map_err(|e| Error::Io {
                    context: "spawning a sweep run".into(),
                    source: e,
                })
        });
        children.push((v, dir, child));
    }
    let mut rows = Vec::new();
    for (v, dir, child) in children {
        let failure = match child {
            Err(e) => Some(e.to_string()),
            Ok(mut c) => match c.wait() {
                Ok(s) if s.success() => None,
                Ok(s) => Some(format!("run exited with {s}")),
                Err(e) => Some(e.to_string()),
            },
        };
        rows.push(sweep_row(v, &dir, failure));
    }
    let summary = finish_sweep(param, rows, out)?;
    println!("{}", serde_json::to_string(&summary).expect("summary serialises"));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Pretrain {
            config,
            seed,
            out,
            dataset_cache,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.pretrain.seed = s;
            }
            let r = run_pretrain(&cfg, &out, dataset_cache.as_deref())?;
            let last = r.evals.last();
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": out.join(scalegrpo::harness::run::PRETRAINED_FILE),
                    "initial_loss": r.initial_loss,
                    "final_eval_loss": last.map(|m| m.eval_loss),
                    "final_fidelity": last.and_then(|m| m.fidelity),
                    "reached_target": r.reached_target,
                })
            );
        }
        Cmd::Train {
            config,
            pretrained,
            reward,
            endpoint,
            iterations,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let reward = select_reward(reward.as_deref(), &cfg, endpoint.as_deref())?;
            let mut grpo = cfg.grpo.clone();
            if let Some(n) = iterations {
                grpo.iterations = n;
            }
            if let Some(s) = seed {
                grpo.seed = s;
            }
            let input = Checkpoint::load(&pretrained)?;
            let r = run_train(&grpo, &input, &reward, &out)?;
            let last = r.history.last();
            println!(
                "{}",
                serde_json::json!({
                    "checkpoint": out.join(scalegrpo::harness::run::CHECKPOINT_FILE),
                    "iterations_run": r.history.len(),
                    "iteration": r.checkpoint.iteration,
                    "final_reward_mean": last.map(|m| m.reward_mean),
                    "final_kl_mean": last.map(|m| m.kl_mean),
                })
            );
        }
        Cmd::Sample {
            checkpoint,
            class,
            n,
            cfg: cfg_scale,
            tau,
            top_k,
            top_p,
            seed,
            config,
            out,
        } => {
            let mut sampler = load_config(config.as_deref())?.sampler;
            if let Some(s) = cfg_scale {
                sampler.cfg_scale = s;
            }
            if let Some(t) = tau {
                sampler.tau = t;
            }
            if top_k.is_some() {
                sampler.top_k = top_k;
            }
            if top_p.is_some() {
                sampler.top_p = top_p;
            }
            if let Some(s) = seed {
                sampler.seed = s;
            }
            let ck = Checkpoint::load(&checkpoint)?;
            let files = run_sample(&ck, class, n, &sampler, &out)?;
            for f in files {
                println!("{}", f.display());
            }
        }
        Cmd::Sweep {
            param,
            values,
            config,
            pretrained,
            reward,
            endpoint,
            iterations,
            parallel,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.reward = select_reward(reward.as_deref(), &cfg, endpoint.as_deref())?;
            if let Some(n) = iterations {
                cfg.grpo.iterations = n;
            }
            let param = match param {
                ParamArg::Beta => SweepParam::Beta,
                ParamArg::Groups => SweepParam::Groups,
            };
            if parallel {
                sweep_parallel(&cfg, &pretrained, param, &values, &out)?;
            } else {
                if values.is_empty() {
                    return Err(Error::InvalidArgument("sweep needs at least one value".into()));
                }
                let input = Checkpoint::load(&pretrained)?;
                let summary = run_sweep(&cfg, &input, param, &values, &out)?;
                println!("{}", serde_json::to_string(&summary).expect("summary serialises"));
            }
        }
        Cmd::Eval {
            checkpoint,
            config,
            reward,
            endpoint,
            n_per_class,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let reward = select_reward(reward.as_deref(), &cfg, endpoint.as_deref())?;
            let ck = Checkpoint::load(&checkpoint)?;
            let specs = cfg.dataset.specs();
            let report = run_eval(&ck, &reward, n_per_class, &cfg.sampler, &specs)?;
            let text = serde_json::to_string_pretty(&report).expect("report serialises") + "\n";
            match out {
                Some(p) => write_out(&p, &text)?,
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
