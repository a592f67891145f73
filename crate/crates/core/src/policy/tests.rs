use super::*;
use crate::msvq::CodebookKind;
use proptest::prelude::*;
use rand::Rng;

fn tiny_config() -> PolicyConfig {
    PolicyConfig {
        schedule: ScaleSchedule::new(vec![(1, 1), (2, 2), (3, 4)]).unwrap(),
        vocab: 5,
        latent_dim: 3,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        n_classes: 3,
        label_dropout_p: 0.1,
    }
}

fn policy_for(config: PolicyConfig) -> Policy {
    let cb = Codebook::build(CodebookKind::Uniform, 11, config.vocab, config.latent_dim).unwrap();
    Policy::new(config, cb).unwrap()
}

fn random_tokens(schedule: &ScaleSchedule, vocab: usize, seed: u64) -> MultiScaleTokens {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grids = schedule
        .scales()
        .iter()
        .map(|&(h, w)| {
            let values = (0..h * w).map(|_| rng.random_range(0..vocab as u32)).collect();
            TokenGrid::new(h, w, values).unwrap()
        })
        .collect();
    MultiScaleTokens::new(grids)
}

/// Params with non-trivial norms and attention so every path carries gradient.
fn perturbed_params(policy: &Policy, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    policy
        .init_params(seed)
        .to_f64()
        .into_iter()
        .map(|v| v + rng.random_range(-0.3..0.3))
        .collect()
}

fn param_formula(c: &PolicyConfig) -> usize {
    let d = c.d_model;
    let per_layer = 12 * d * d + 13 * d;
    (c.n_classes + 1) * d
        + c.latent_dim * d
        + d
        + c.schedule.num_scales() * d
        + c.schedule.total_tokens() * d
        + c.n_layers * per_layer
        + 2 * d
        + d * c.vocab
        + c.vocab
}

#[test]
fn param_count_matches_closed_form() {
    for config in [tiny_config(), PolicyConfig::desk()] {
        let p = policy_for(config.clone());
        assert_eq!(p.param_count(), param_formula(&config));
        assert_eq!(p.init_params(0).len(), p.param_count());
    }
    assert_eq!(policy_for(PolicyConfig::desk()).param_count(), 174_096);
}

#[test]
fn init_follows_layout_kinds() {
    let p = policy_for(PolicyConfig::desk());
    let params = p.init_params(3);
    let v = params.values();
    for (name, seg, kind) in &p.layout().named {
        let s = &v[seg.range()];
        match kind {
            InitKind::Zero => assert!(s.iter().all(|&x| x == 0.0), "{name}"),
            InitKind::One => assert!(s.iter().all(|&x| x == 1.0), "{name}"),
            _ => {
                let n = s.len() as f64;
                let var = s.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / n;
                let want = match kind {
                    InitKind::Embedding => 0.02f64,
                    InitKind::FanIn => 1.0 / 8.0,
                    _ => 1.0 / (64.0f64 * 3.0).sqrt(),
                };
                let rel = (var.sqrt() - want).abs() / want;
                assert!(rel < 0.25 || n < 100.0, "{name}: std {} vs {want}", var.sqrt());
            }
        }
    }
    assert_eq!(params, p.init_params(3));
    assert_ne!(params, p.init_params(4));
}

#[test]
fn config_validation() {
    let mut c = tiny_config();
    c.n_heads = 3;
    assert!(c.validate().is_err());
    let mut c = tiny_config();
    c.label_dropout_p = 1.5;
    assert!(c.validate().is_err());
    let c = tiny_config();
    let cb = Codebook::build(CodebookKind::Uniform, 0, 7, 3).unwrap();
    assert!(Policy::new(c, cb).is_err());
}

#[test]
fn rejects_out_of_range_class_and_tokens() {
    let p = policy_for(tiny_config());
    let params = p.init_params(0);
    let toks = random_tokens(p.schedule(), 5, 1);
    assert!(p.forward(&params, Some(3), &toks).is_err());
    assert!(p.forward(&params, None, &toks).is_ok());
    let mut bad = toks.clone();
    bad.grids_mut()[1] = TokenGrid::new(2, 2, vec![0, 1, 2, 5]).unwrap();
    assert!(p.forward(&params, Some(0), &bad).is_err());
}

#[test]
fn init_loss_is_near_uniform() {
    let p = policy_for(PolicyConfig::desk());
    let params = p.init_params(0);
    let toks: Vec<_> = (0..2).map(|s| random_tokens(p.schedule(), 16, s)).collect();
    let batch: Vec<_> = toks
        .iter()
        .map(|t| LabeledTokens {
            class: Some(1),
            tokens: t,
        })
        .collect();
    let (loss, _) = p.loss_and_grad(&params, &LossSpec::CrossEntropy(&batch)).unwrap();
    assert!((loss - 16f64.ln()).abs() < 0.1, "loss {loss}");
}

#[test]
fn later_scales_do_not_affect_earlier_logits() {
    let p = policy_for(tiny_config());
    let params = p.init_params(5);
    let a = random_tokens(p.schedule(), 5, 1);
    let mut b = a.clone();
    // r_1 feeds block 2 only; r_2 feeds nothing
    b.grids_mut()[1] = random_tokens(p.schedule(), 5, 9).grids()[1].clone();
    b.grids_mut()[2] = random_tokens(p.schedule(), 5, 10).grids()[2].clone();
    let la = p.forward(&params, Some(0), &a).unwrap();
    let lb = p.forward(&params, Some(0), &b).unwrap();
    assert_eq!(la.scale(0), lb.scale(0));
    assert_eq!(la.scale(1), lb.scale(1));
    assert_ne!(la.scale(2), lb.scale(2));
}

#[test]
fn prefix_logits_equal_full_pass() {
    let p = policy_for(PolicyConfig::desk());
    let params = p.init_params(2);
    let toks = random_tokens(p.schedule(), 16, 4);
    let full = p.forward(&params, Some(2), &toks).unwrap();
    for k in 0..5 {
        let pre = p
            .next_scale_logits(params.values(), 2, &toks.grids()[..k])
            .unwrap();
        assert_eq!(pre.as_slice(), full.scale(k), "scale {k}");
    }
}

#[test]
fn log_prob_sums_and_temperature() {
    let p = policy_for(tiny_config());
    let params = p.init_params(1);
    let toks = random_tokens(p.schedule(), 5, 2);
    let lp = p.log_prob(&params, Some(1), &toks, 1.0).unwrap();
    let sums = lp.per_scale_sums();
    assert_eq!(sums.len(), 3);
    assert!((sums.iter().sum::<f64>() - lp.total()).abs() < 1e-12);
    assert!(lp.values().iter().all(|&v| v <= 0.0));

    // logits at every position: log p must match an explicit softmax
    let logits = p.forward(&params, Some(1), &toks).unwrap();
    for (pos, tok) in toks.flat().enumerate() {
        let row: Vec<f64> = logits.row(pos).iter().map(|&z| z as f64 / 0.7).collect();
        let denom: f64 = row.iter().map(|z| z.exp()).sum();
        let want = (row[tok as usize].exp() / denom).ln();
        let got = p.log_prob(&params, Some(1), &toks, 0.7).unwrap().values()[pos];
        assert!((got - want).abs() < 1e-12);
    }
    assert!(p.log_prob(&params, Some(1), &toks, 0.0).is_err());
}

#[test]
fn token_log_prob_is_stable_for_huge_logits() {
    let row = [1e4, -1e4, 0.0, 9_999.0];
    let lp = token_log_prob(&row, 0, 1.0);
    assert!(lp.is_finite() && lp <= 0.0);
    assert!((lp + (1.0f64 + (-1.0f64).exp()).ln()).abs() < 1e-12);
    assert!(token_log_prob(&row, 1, 1.0).is_finite());
    let total: f64 = (0..4).map(|i| token_log_prob(&row, i, 0.7).exp()).sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn param_squares_gradient() {
    let p = policy_for(tiny_config());
    let params = p.init_params(0);
    let (loss, grad) = p.loss_and_grad(&params, &LossSpec::ParamSquares).unwrap();
    let want: f64 = params.values().iter().map(|&v| (v as f64).powi(2)).sum();
    assert!((loss - want).abs() < 1e-9 * want.max(1.0));
    for (g, v) in grad.iter().zip(params.values()) {
        assert_eq!(*g, 2.0 * v);
    }
}

#[test]
fn non_finite_params_give_numeric_error() {
    let p = policy_for(tiny_config());
    let mut params = p.init_params(0);
    let head = p.layout().head_b.off;
    params.values_mut()[head] = f32::NAN;
    let toks = random_tokens(p.schedule(), 5, 0);
    let batch = [LabeledTokens {
        class: Some(0),
        tokens: &toks,
    }];
    let err = p.loss_and_grad(&params, &LossSpec::CrossEntropy(&batch)).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err:?}");
}

/// Central differences in f64 against the analytic gradient.
fn check_gradient(policy: &Policy, params: &[f64], spec: &LossSpec<'_>, coords: &[usize]) {
    let (_, grad) = policy.loss_and_grad_in(params, spec).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &i in coords {
        let mut plus = params.to_vec();
        let mut minus = params.to_vec();
        plus[i] += h;
        minus[i] -= h;
        let lp = policy.loss_and_grad_in(&plus, spec).unwrap().0;
        let lm = policy.loss_and_grad_in(&minus, spec).unwrap().0;
        let fd = (lp - lm) / (2.0 * h);
        let err = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-4);
        let name = &policy
            .layout()
            .named
            .iter()
            .find(|(_, s, _)| s.range().contains(&i))
            .unwrap()
            .0;
        assert!(err < 1e-4, "coord {i} ({name}): fd {fd} analytic {}", grad[i]);
        worst = worst.max(err);
    }
}

fn coords_covering_every_segment(policy: &Policy, per_seg: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, seg, _) in &policy.layout().named {
        for _ in 0..per_seg.min(seg.len) {
            out.push(seg.off + rng.random_range(0..seg.len));
        }
    }
    out
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let p = policy_for(tiny_config());
    let params = perturbed_params(&p, 7);
    let toks: Vec<_> = (0..3).map(|s| random_tokens(p.schedule(), 5, 20 + s)).collect();
    let batch: Vec<_> = toks
        .iter()
        .zip([Some(0), None, Some(2)])
        .map(|(t, class)| LabeledTokens { class, tokens: t })
        .collect();
    let coords = coords_covering_every_segment(&p, 4, 1);
    check_gradient(&p, &params, &LossSpec::CrossEntropy(&batch), &coords);
}

/// Weighted log-likelihood: exercises an arbitrary per-token upstream gradient.
struct WeightedLogLik {
    weights: Vec<f64>,
    tokens: Vec<Vec<u32>>,
    tau: f64,
}

impl SequenceObjective for WeightedLogLik {
    fn eval(&self, index: usize, logits: &[f64], vocab: usize, dlogits: &mut [f64]) -> f64 {
        let mut loss = 0.0;
        for (pos, (row, drow)) in logits
            .chunks_exact(vocab)
            .zip(dlogits.chunks_exact_mut(vocab))
            .enumerate()
        {
            let tok = self.tokens[index][pos] as usize;
            let w = self.weights[index] * (1.0 + 0.1 * pos as f64);
            loss -= w * token_log_prob(row, tok, self.tau);
            let scaled: Vec<f64> = row.iter().map(|z| z / self.tau).collect();
            let lse = log_sum_exp(&scaled);
            for (j, g) in drow.iter_mut().enumerate() {
                let pj = (scaled[j] - lse).exp();
                let ind = if j == tok { 1.0 } else { 0.0 };
                *g = -w * (ind - pj) / self.tau;
            }
        }
        loss
    }
}

#[test]
fn sequence_objective_gradient_matches_finite_differences() {
    let p = policy_for(tiny_config());
    let params = perturbed_params(&p, 8);
    let toks: Vec<_> = (0..2).map(|s| random_tokens(p.schedule(), 5, 40 + s)).collect();
    let batch: Vec<_> = toks
        .iter()
        .map(|t| LabeledTokens {
            class: Some(1),
            tokens: t,
        })
        .collect();
    let objective = WeightedLogLik {
        weights: vec![0.7, -1.3],
        tokens: toks.iter().map(|t| t.flat().collect()).collect(),
        tau: 0.7,
    };
    let spec = LossSpec::Sequence {
        batch: &batch,
        objective: &objective,
    };
    let coords = coords_covering_every_segment(&p, 3, 2);
    check_gradient(&p, &params, &spec, &coords);
}

#[test]
fn batch_gradient_is_sum_of_parts() {
    let p = policy_for(tiny_config());
    let params = p.init_params(3);
    let a = random_tokens(p.schedule(), 5, 1);
    let b = random_tokens(p.schedule(), 5, 2);
    let items = [
        LabeledTokens {
            class: Some(0),
            tokens: &a,
        },
        LabeledTokens {
            class: Some(1),
            tokens: &b,
        },
    ];
    let (l_ab, g_ab) = p.loss_and_grad(&params, &LossSpec::CrossEntropy(&items)).unwrap();
    let (l_a, g_a) = p.loss_and_grad(&params, &LossSpec::CrossEntropy(&items[..1])).unwrap();
    let (l_b, g_b) = p.loss_and_grad(&params, &LossSpec::CrossEntropy(&items[1..])).unwrap();
    // equal-length sequences: batch mean is the mean of the two means
    assert!((l_ab - 0.5 * (l_a + l_b)).abs() < 1e-9);
    for i in 0..g_ab.len() {
        let want = 0.5 * (g_a[i] + g_b[i]);
        assert!((g_ab[i] - want).abs() <= 1e-6 * want.abs().max(1e-3));
    }
    let again = p.loss_and_grad(&params, &LossSpec::CrossEntropy(&items)).unwrap();
    assert_eq!(again.1, g_ab);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn log_probs_are_normalised(seed in 0u64..1000, tau in 0.3f64..2.0) {
        let p = policy_for(tiny_config());
        let params = p.init_params(seed);
        let toks = random_tokens(p.schedule(), 5, seed);
        let logits = p.forward(&params, Some((seed % 3) as usize), &toks).unwrap();
        for pos in 0..p.schedule().total_tokens() {
            let row: Vec<f64> = logits.row(pos).iter().map(|&z| z as f64).collect();
            let s: f64 = (0..5).map(|j| token_log_prob(&row, j, tau).exp()).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
#[ignore]
fn bench_desk() {
    let p = policy_for(PolicyConfig::desk());
    let params = p.init_params(0);
    let toks: Vec<_> = (0..16).map(|s| random_tokens(p.schedule(), 16, s)).collect();
    let batch: Vec<_> = toks.iter().map(|t| LabeledTokens { class: Some(1), tokens: t }).collect();
    let t = std::time::Instant::now();
    p.loss_and_grad(&params, &LossSpec::CrossEntropy(&batch)).unwrap();
    eprintln!("16 fwd+bwd: {:?}", t.elapsed());
    let t = std::time::Instant::now();
    for tk in &toks { p.forward(&params, Some(1), tk).unwrap(); }
    eprintln!("16 fwd: {:?}", t.elapsed());
    let t = std::time::Instant::now();
    for tk in &toks { for k in 0..5 { p.next_scale_logits(params.values(), 1, &tk.grids()[..k]).unwrap(); } }
    eprintln!("16 prefix sampling passes: {:?}", t.elapsed());
}
