use super::*;
use crate::harness::exit_code;
use crate::rewards::{RemoteReward, RemoteSpec};

fn tiny_config() -> ExperimentConfig {
    let text = r#"{
        "policy": {"schedule": [[1,1],[2,2],[4,4]], "vocab": 8, "d_model": 16, "n_layers": 1, "n_heads": 2, "n_classes": 2},
        "dataset": {"n_classes": 2, "samples_per_class": 16, "height": 4, "width": 4},
        "pretrain": {"epochs": 1, "batch_size": 8, "lr": 0.003, "eval_samples": 8},
        "grpo": {"group_size": 4, "batch_labels": 2, "minibatch": 8, "iterations": 2, "lr": 0.001}
    }"#;
    ExperimentConfig::from_json(text).unwrap()
}

fn pretrained(cfg: &ExperimentConfig) -> Checkpoint {
    let dir = tempfile::tempdir().unwrap();
    run_pretrain(cfg, dir.path(), None).unwrap().checkpoint
}

#[test]
fn pretrain_writes_a_loadable_checkpoint_and_seed_matters() {
    let cfg = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let run = run_pretrain(&cfg, dir.path(), None).unwrap();
    let bytes = fs::read(dir.path().join(PRETRAINED_FILE)).unwrap();
    assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), run.checkpoint);
    assert_eq!(run.checkpoint.to_bytes(), bytes);
    let lines = fs::read_to_string(dir.path().join(PRETRAIN_METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), run.evals.len());

    let again = tempfile::tempdir().unwrap();
    run_pretrain(&cfg, again.path(), None).unwrap();
    assert_eq!(fs::read(again.path().join(PRETRAINED_FILE)).unwrap(), bytes);

    let mut other = cfg.clone();
    other.pretrain.seed = 5;
    let d2 = tempfile::tempdir().unwrap();
    run_pretrain(&other, d2.path(), None).unwrap();
    assert_ne!(fs::read(d2.path().join(PRETRAINED_FILE)).unwrap(), bytes);
}

#[test]
fn pretrain_uses_the_dataset_cache() {
    let cfg = tiny_config();
    let cache = tempfile::tempdir().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_pretrain(&cfg, a.path(), Some(cache.path())).unwrap();
    assert!(cache.path().join("index.json").exists());
    // the cache stores 8-bit pixels, so compare two cached runs
    let second = run_pretrain(&cfg, b.path(), Some(cache.path())).unwrap();
    let c = tempfile::tempdir().unwrap();
    let third = run_pretrain(&cfg, c.path(), Some(cache.path())).unwrap();
    assert_eq!(second.checkpoint, third.checkpoint);
}

#[test]
fn zero_iterations_copy_the_input() {
    let cfg = tiny_config();
    let ck = pretrained(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let grpo = GRPOConfig {
        iterations: 0,
        ..cfg.grpo.clone()
    };
    run_train(&grpo, &ck, &cfg.reward, dir.path()).unwrap();
    assert_eq!(fs::read(dir.path().join(CHECKPOINT_FILE)).unwrap(), ck.to_bytes());
    assert_eq!(fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap(), "");
}

#[test]
fn training_writes_one_metrics_line_per_iteration_and_resumes_exactly() {
    let cfg = tiny_config();
    let ck = pretrained(&cfg);
    let full = tempfile::tempdir().unwrap();
    let g4 = GRPOConfig {
        iterations: 4,
        ..cfg.grpo.clone()
    };
    let run = run_train(&g4, &ck, &cfg.reward, full.path()).unwrap();
    assert_eq!(run.history.len(), 4);
    assert_eq!(read_metrics(&full.path().join(METRICS_FILE)).unwrap().len(), 4);
    assert!(fs::read_to_string(full.path().join(CURVE_FILE)).unwrap().contains("<polyline"));

    let half = tempfile::tempdir().unwrap();
    let g2 = GRPOConfig {
        iterations: 2,
        ..cfg.grpo.clone()
    };
    run_train(&g2, &ck, &cfg.reward, half.path()).unwrap();
    let mid = Checkpoint::load(&half.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(mid.iteration, 2);
    let rest = tempfile::tempdir().unwrap();
    let resumed = run_train(&g4, &mid, &cfg.reward, rest.path()).unwrap();
    assert_eq!(resumed.history.len(), 2);
    assert_eq!(
        fs::read(rest.path().join(CHECKPOINT_FILE)).unwrap(),
        fs::read(full.path().join(CHECKPOINT_FILE)).unwrap()
    );
    let strip = |p: &Path| -> Vec<IterationMetrics> {
        read_metrics(p)
            .unwrap()
            .into_iter()
            .map(|m| IterationMetrics { wall_ms: 0, ..m })
            .collect()
    };
    let mut joined = strip(&half.path().join(METRICS_FILE));
    joined.extend(strip(&rest.path().join(METRICS_FILE)));
    assert_eq!(joined, strip(&full.path().join(METRICS_FILE)));
}

#[test]
fn unreachable_scorer_fails_the_probe() {
    let port = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap().port()
    };
    let reward = RewardSpec::Remote(RemoteSpec {
        endpoint: Some(format!("http://127.0.0.1:{port}")),
        reward: RemoteReward::Aesthetic,
        prompt: None,
        timeout_ms: 500,
        max_in_flight: 1,
    });
    let cfg = tiny_config();
    let ck = pretrained(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let err = run_train(&cfg.grpo, &ck, &reward, dir.path()).err().unwrap();
    assert_eq!(exit_code(&err), 4, "{err}");
}

#[test]
fn sampling_is_byte_stable_and_checks_the_class() {
    let cfg = tiny_config();
    let ck = pretrained(&cfg);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let pa = run_sample(&ck, 1, 3, &cfg.sampler, a.path()).unwrap();
    run_sample(&ck, 1, 3, &cfg.sampler, b.path()).unwrap();
    assert_eq!(pa.len(), 3);
    for i in 0..3 {
        let name = format!("1_{i}.ppm");
        assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
    }
    let empty = tempfile::tempdir().unwrap();
    let out = empty.path().join("none");
    assert!(run_sample(&ck, 0, 0, &cfg.sampler, &out).unwrap().is_empty());
    assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
    let err = run_sample(&ck, 2, 1, &cfg.sampler, a.path()).unwrap_err();
    assert_eq!(exit_code(&err), 2);
}

#[test]
fn eval_of_a_constant_reward() {
    let cfg = tiny_config();
    let ck = pretrained(&cfg);
    let always = RewardSpec::BrightThreshold { threshold: -1.0 };
    let r = run_eval(&ck, &always, 4, &cfg.sampler, &cfg.dataset.specs()).unwrap();
    assert_eq!(r.reward_mean, 1.0);
    assert_eq!(r.reward_std, 0.0);
    assert_eq!(r.per_class.len(), 2);
    assert!(r.per_class.iter().all(|c| c.reward_std == 0.0 && (0.0..=1.0).contains(&c.fidelity)));
    let again = run_eval(&ck, &always, 4, &cfg.sampler, &cfg.dataset.specs()).unwrap();
    assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&again).unwrap());
}

#[test]
fn group_sweeps_hold_the_sampling_budget() {
    let base = GRPOConfig::default();
    for g in [2.0, 4.0, 8.0, 16.0] {
        let c = sweep_config(&base, SweepParam::Groups, g).unwrap();
        assert_eq!(c.group_size * c.batch_labels, 128);
    }
    assert!(sweep_config(&base, SweepParam::Groups, 1.0).is_err());
    assert!(sweep_config(&base, SweepParam::Groups, 2.5).is_err());
    assert_eq!(sweep_config(&base, SweepParam::Beta, 0.0).unwrap().beta, 0.0);
    assert!(sweep_config(&base, SweepParam::Beta, -1.0).is_err());
}

#[test]
fn sweep_records_failures_and_keeps_going() {
    let cfg = tiny_config();
    let ck = pretrained(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let s = run_sweep(&cfg, &ck, SweepParam::Groups, &[1.0, 2.0, 4.0], dir.path()).unwrap();
    assert_eq!(s.rows.len(), 3);
    assert!(!s.rows[0].ok && s.rows[0].error.is_some());
    assert!(s.rows[1].ok && s.rows[2].ok);
    assert_eq!(s.rows[2].iterations, 2);
    assert!(dir.path().join("groups_4").join(METRICS_FILE).exists());
    let text = fs::read_to_string(dir.path().join(SWEEP_SUMMARY_FILE)).unwrap();
    let back: SweepSummary = serde_json::from_str(&text).unwrap();
    assert_eq!(back, s);
    assert!(dir.path().join(SWEEP_PLOT_FILE).exists());
    let err = run_sweep(&cfg, &ck, SweepParam::Beta, &[], dir.path()).unwrap_err();
    assert_eq!(exit_code(&err), 2);
}
