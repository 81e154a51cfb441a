//! Acceptance suite: one test per criterion, each printing a pass/fail
//! line with the measured value and its tolerance (run with
//! `cargo test --test acceptance -- --nocapture` to see them).
//!
//! Criteria 7, 8, and 10 share one full pipeline run of the stock lexicon
//! experiment; criterion 10 performs a second run and compares bytes.

use std::sync::OnceLock;
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use tnt_core::distributions::{project_out_negatives, NegativeSet, TokenDistribution, Vocab};
use tnt_core::eval::{read_reports, EvalReport};
use tnt_core::experiment::{build_curves, cmd_pipeline, ExperimentConfig, RunContext};
use tnt_core::model::{forward_all, SequenceModel, TabularModel, ZERO_CONDITIONAL_SCORE};
use tnt_core::objective::{
    sequence_loss, AnnotatedSequence, Method, ObjectiveConfig, TokenAnnotation,
};
use tnt_core::oracles::{
    brute_force_projection, exhaustive_sequence_distribution, gradient_check_max_rel_error,
    random_gradcheck_instance, reward_tilted_distribution, token_rl_equivalence_check,
    RewardSpec, SequenceDistribution,
};
use tnt_core::trainer::{train, Optimizer, TrainConfig};
use tnt_core::TokenId;

fn random_distribution(rng: &mut ChaCha20Rng, len: usize) -> TokenDistribution {
    let raw: Vec<f64> = (0..len).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
    let sum: f64 = raw.iter().sum();
    TokenDistribution::new(raw.into_iter().map(|x| x / sum).collect()).unwrap()
}

fn report(criterion: &str, passed: bool, detail: String, started: Instant) {
    let status = if passed { "PASS" } else { "FAIL" };
    println!(
        "criterion {criterion}: {status} — {detail} ({:.1}s)",
        started.elapsed().as_secs_f64()
    );
}

#[test]
fn criterion_1_projection_exactness() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let mut trials = 0usize;
    while trials < 500 {
        let v = rng.gen_range(3..=5usize);
        let p = random_distribution(&mut rng, v);
        let k = rng.gen_range(1..v - 1);
        let neg: NegativeSet =
            rand::seq::index::sample(&mut rng, v, k).iter().map(|i| i as TokenId).collect();
        let Ok(exact) = project_out_negatives(&p, &neg) else { continue };
        trials += 1;
        let coarse = brute_force_projection(&p, &neg, 200).expect("feasible instance");
        let gap = exact
            .probs()
            .iter()
            .zip(coarse.probs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(gap);
    }
    let tolerance = 1.0 / 200.0;
    let passed = worst <= tolerance && started.elapsed().as_secs() < 60;
    report(
        "1 (projection matches the grid-200 oracle, 500 instances)",
        passed,
        format!("max ℓ∞ gap {worst:.3e} ≤ {tolerance:.3e}"),
        started,
    );
    assert!(passed);
}

#[test]
fn criterion_2_commutativity() {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut trials = 0usize;
    while trials < 1000 {
        let v = rng.gen_range(3..=8usize);
        let p = random_distribution(&mut rng, v);
        let pick = |rng: &mut ChaCha20Rng| -> NegativeSet {
            let k = rng.gen_range(0..v - 1);
            rand::seq::index::sample(rng, v, k).iter().map(|i| i as TokenId).collect()
        };
        let a = pick(&mut rng);
        let b = pick(&mut rng);
        let union = a.union(&b);
        let kept: f64 = p
            .probs()
            .iter()
            .enumerate()
            .filter(|(i, _)| !union.contains(*i as TokenId))
            .map(|(_, &x)| x)
            .sum();
        if kept <= 1e-6 {
            continue;
        }
        trials += 1;
        let ab = project_out_negatives(&project_out_negatives(&p, &a).unwrap(), &b).unwrap();
        let ba = project_out_negatives(&project_out_negatives(&p, &b).unwrap(), &a).unwrap();
        let direct = project_out_negatives(&p, &union).unwrap();
        for i in 0..v {
            worst = worst.max((ab[i] - direct[i]).abs());
            worst = worst.max((ba[i] - direct[i]).abs());
        }
    }
    let passed = worst <= 1e-12;
    report(
        "2 (negative updates commute and match the union, 1000 instances)",
        passed,
        format!("max deviation {worst:.3e} ≤ 1e-12"),
        started,
    );
    assert!(passed);
}

#[test]
fn criterion_3_gradient_correctness() {
    let started = Instant::now();
    let mut worst_neural = 0.0f64;
    for (m, method) in Method::UPDATE_METHODS.into_iter().enumerate() {
        for i in 0..50u64 {
            let inst = random_gradcheck_instance(method, 0x3000 + (m as u64) * 1000 + i);
            let err = gradient_check_max_rel_error(
                &inst.model,
                &inst.original_conditionals,
                &inst.seq,
                &inst.cfg,
                1e-5,
            )
            .expect("gradient check");
            worst_neural = worst_neural.max(err);
        }
    }

    // tabular models share the same objective path; spot-check each method
    let mut worst_tabular = 0.0f64;
    let vocab = Vocab::new(8, 1, 2, 0).unwrap();
    for (m, method) in Method::UPDATE_METHODS.into_iter().enumerate() {
        for i in 0..50u64 {
            let mut rng = ChaCha20Rng::seed_from_u64(0x7AB0 + (m as u64) * 100 + i);
            let input: Vec<TokenId> = (0..3).map(|_| rng.gen_range(3..8)).collect();
            let mut output: Vec<TokenId> = (0..4).map(|_| rng.gen_range(3..8)).collect();
            output.push(2);
            let mut model = TabularModel::new(vocab.clone(), 2);
            model.register_context(&input, &output);
            for p in model.parameters_mut() {
                *p = rng.gen_range(-1.5..1.5);
            }
            let mut original = TabularModel::new(vocab.clone(), 2);
            original.register_context(&input, &output);
            for p in original.parameters_mut() {
                *p = rng.gen_range(-1.5..1.5);
            }
            let conditionals = forward_all(&original, &input, &output).unwrap();
            let mut annotations = Vec::new();
            for t in 0..output.len() - 1 {
                if rng.gen_bool(0.4) {
                    annotations.push(TokenAnnotation {
                        position: t,
                        negative_ids: NegativeSet::new(vec![output[t]]),
                    });
                }
            }
            let seq = AnnotatedSequence::new(input, output, annotations).unwrap();
            let cfg = ObjectiveConfig::new(method)
                .with_alpha(10f64.powf(rng.gen_range(-2.0..2.0)));
            let err = gradient_check_max_rel_error(&model, &conditionals, &seq, &cfg, 1e-5)
                .expect("gradient check");
            worst_tabular = worst_tabular.max(err);
        }
    }
    let worst = worst_neural.max(worst_tabular);
    let passed = worst < 1e-4 && started.elapsed().as_secs() < 300;
    report(
        "3 (analytic gradients vs finite differences, 50/method/model-kind)",
        passed,
        format!("max relative error {worst:.3e} < 1e-4 (neural {worst_neural:.3e}, tabular {worst_tabular:.3e})"),
        started,
    );
    assert!(passed);
}

/// The criterion-4/5 fixture: vocabulary of 6 (three content tokens, one of
/// them flagged), every sequence exactly three content tokens plus a forced
/// EOS, and constant flagged-token mass at every conditional. Constant mass
/// and fixed length make the product of per-position projections coincide
/// with the sequence-level zero-and-renormalize distribution, which is what
/// criterion 5 measures.
struct TinyTask {
    original: TabularModel,
    train_set: Vec<AnnotatedSequence>,
    bad: TokenId,
    input: Vec<TokenId>,
}

fn tiny_task() -> TinyTask {
    let vocab = Vocab::new(6, 1, 2, 0).unwrap();
    let bad: TokenId = 5;
    let content: [TokenId; 3] = [3, 4, 5];
    let input: Vec<TokenId> = vec![3];
    let mut rng = ChaCha20Rng::seed_from_u64(0x45);
    let mut original = TabularModel::new(vocab.clone(), 3);

    // depth 0..2: content distribution with flagged mass exactly 0.2
    let mut prefixes: Vec<Vec<TokenId>> = vec![vec![]];
    for depth in 0..=2usize {
        let next: Vec<Vec<TokenId>> = prefixes
            .iter()
            .flat_map(|p| {
                content.iter().map(move |&c| {
                    let mut q = p.clone();
                    q.push(c);
                    q
                })
            })
            .collect();
        for prefix in &prefixes {
            if prefix.len() == depth {
                let a = rng.gen_range(0.15..0.65);
                let mut probs = vec![0.0; 6];
                probs[3] = a;
                probs[4] = 0.8 - a;
                probs[5] = 0.2;
                original.set_next_distribution(
                    &input,
                    prefix,
                    &TokenDistribution::new(probs).unwrap(),
                );
            }
        }
        prefixes.extend(next);
    }
    // depth 3: forced EOS
    for prefix in prefixes.iter().filter(|p| p.len() == 3) {
        let mut probs = vec![0.0; 6];
        probs[vocab.eos() as usize] = 1.0;
        original.set_next_distribution(&input, prefix, &TokenDistribution::new(probs).unwrap());
    }

    // the fully-enumerated, fully-annotated corpus: all 27 sequences, with
    // the flagged token marked negative at every position
    let mut train_set = Vec::new();
    for &x in &content {
        for &y in &content {
            for &z in &content {
                let output = vec![x, y, z, vocab.eos()];
                let annotations = (0..output.len())
                    .map(|position| TokenAnnotation {
                        position,
                        negative_ids: NegativeSet::new(vec![bad]),
                    })
                    .collect();
                train_set
                    .push(AnnotatedSequence::new(input.clone(), output, annotations).unwrap());
            }
        }
    }
    TinyTask { original, train_set, bad, input }
}

fn trained_tiny_model() -> (TinyTask, TabularModel) {
    let task = tiny_task();
    let mut cfg = TrainConfig::new(ObjectiveConfig::new(Method::TnFf).with_penalty(0.0));
    cfg.batch_size = task.train_set.len();
    cfg.steps = 4000;
    cfg.eval_every = 500;
    cfg.learning_rate = 1.5;
    cfg.optimizer = Optimizer::GradientDescent;
    cfg.seed = 9;
    let result = train(&task.original, &task.train_set, &task.train_set, &cfg).unwrap();
    assert!(!result.aborted_nonfinite);
    (task, result.model)
}

static TINY_RUN: OnceLock<(TinyTask, TabularModel)> = OnceLock::new();

#[test]
fn criterion_4_token_level_convergence() {
    let started = Instant::now();
    let (task, trained) = TINY_RUN.get_or_init(trained_tiny_model);
    let mut worst_kl = 0.0f64;
    for seq in &task.train_set {
        let original = forward_all(&task.original, &seq.input, &seq.output).unwrap();
        let model = forward_all(trained, &seq.input, &seq.output).unwrap();
        for (t, (orig, new)) in original.iter().zip(&model).enumerate() {
            let target =
                tnt_core::objective::target_distribution(orig, seq.negative_set_at(t)).unwrap();
            let log_probs: Vec<f64> = new
                .probs()
                .iter()
                .map(|&p| if p > 0.0 { p.ln() } else { -1e4 })
                .collect();
            worst_kl = worst_kl.max(tnt_core::distributions::forward_kl(&target, &log_probs));
        }
    }
    let passed = worst_kl < 1e-3 && started.elapsed().as_secs() < 120;
    report(
        "4 (tabular finetuning reaches the per-context analytic optimum)",
        passed,
        format!("max context KL {worst_kl:.3e} < 1e-3"),
        started,
    );
    assert!(passed);
}

#[test]
fn criterion_5_sequence_level_optimum() {
    let started = Instant::now();
    let (task, trained) = TINY_RUN.get_or_init(trained_tiny_model);
    let trained_dist = exhaustive_sequence_distribution(trained, &task.input, 4).unwrap();
    let original_dist =
        exhaustive_sequence_distribution(&task.original, &task.input, 4).unwrap();
    // reference: zero flagged sequences and renormalize
    let mut kept: Vec<(Vec<TokenId>, f64)> = original_dist
        .sequences
        .iter()
        .filter(|(s, _)| !s.contains(&task.bad))
        .cloned()
        .collect();
    let z: f64 = kept.iter().map(|(_, p)| p).sum();
    kept.iter_mut().for_each(|(_, p)| *p /= z);
    let reference = SequenceDistribution { sequences: kept, unterminated_mass: 0.0 };
    let tv = trained_dist.total_variation(&reference);
    let passed = tv < 0.02 && started.elapsed().as_secs() < 60;
    report(
        "5 (trained model matches the sequence-level projection)",
        passed,
        format!("total variation {tv:.3e} < 0.02"),
        started,
    );
    assert!(passed);
}

#[test]
fn criterion_6_reward_tilt_identity() {
    let started = Instant::now();
    let vocab = Vocab::new(5, 1, 2, 0).unwrap();
    let max_len = 3;
    let mut rng = ChaCha20Rng::seed_from_u64(606);
    let mut worst_diff = 0.0f64;
    for _ in 0..100 {
        let model = tnt_core::model::TinyNeuralModel::new(vocab.clone(), 3, 4, 2, rng.gen());
        let original = tnt_core::model::TinyNeuralModel::new(vocab.clone(), 3, 4, 2, rng.gen());
        let mut rewards = std::collections::HashMap::new();
        let mut stack: Vec<Vec<TokenId>> = vec![vec![]];
        while let Some(prefix) = stack.pop() {
            if prefix.len() >= max_len {
                continue;
            }
            for v in 0..vocab.size() as TokenId {
                let mut next = prefix.clone();
                next.push(v);
                rewards.insert(next.clone(), rng.gen_range(-1.0..1.0));
                if v != vocab.eos() {
                    stack.push(next);
                }
            }
        }
        let spec = RewardSpec::new(0.5, rewards);
        let eq = token_rl_equivalence_check(&model, &original, &spec, &[3], max_len).unwrap();
        worst_diff = worst_diff.max(eq.difference);
    }

    // β → 0 with reward −1 on flagged prefixes: the tilt converges to the
    // zero-and-renormalize projection
    let bad: TokenId = 4;
    let mut worst_tv = 0.0f64;
    for _ in 0..10 {
        let original = tnt_core::model::TinyNeuralModel::new(vocab.clone(), 3, 4, 2, rng.gen());
        let mut rewards = std::collections::HashMap::new();
        let mut stack: Vec<Vec<TokenId>> = vec![vec![]];
        while let Some(prefix) = stack.pop() {
            if prefix.len() >= 4 {
                continue;
            }
            for v in 0..vocab.size() as TokenId {
                let mut next = prefix.clone();
                next.push(v);
                if next.contains(&bad) {
                    rewards.insert(next.clone(), -1.0);
                }
                if v != vocab.eos() {
                    stack.push(next);
                }
            }
        }
        let tilted = reward_tilted_distribution(
            &original,
            &RewardSpec::new(0.01, rewards.clone()),
            &[3],
            4,
        )
        .unwrap();
        let zero = RewardSpec::new(1.0, std::collections::HashMap::new());
        let flat = reward_tilted_distribution(&original, &zero, &[3], 4).unwrap();
        let mut reference: Vec<f64> = flat
            .iter()
            .map(|(s, p)| if s.contains(&bad) { 0.0 } else { *p })
            .collect();
        let z: f64 = reference.iter().sum();
        reference.iter_mut().for_each(|p| *p /= z);
        let tv: f64 = 0.5
            * tilted
                .iter()
                .zip(&reference)
                .map(|((_, a), b)| (a - b).abs())
                .sum::<f64>();
        worst_tv = worst_tv.max(tv);
    }
    let passed = worst_diff < 1e-8 && worst_tv < 0.01 && started.elapsed().as_secs() < 120;
    report(
        "6 (KL-regularized reward identity and small-β projection limit)",
        passed,
        format!("max identity gap {worst_diff:.3e} < 1e-8; tilt TV {worst_tv:.3e} < 0.01"),
        started,
    );
    assert!(passed);
}

#[test]
fn criterion_9_baseline_failure_mode() {
    let started = Instant::now();
    // equal negative-token mass, different dispersion of the rest
    let concentrated = [0.3, 0.7, 0.0, 0.0];
    let dispersed = [0.3, 0.2333, 0.2333, 0.2334];
    let scores = |p: &[f64]| -> Vec<Vec<f64>> {
        vec![p.iter().map(|&x| if x > 0.0 { x.ln() } else { -1e4 }).collect()]
    };
    let original = vec![TokenDistribution::new(vec![0.4, 0.3, 0.2, 0.1]).unwrap()];
    let seq = AnnotatedSequence::new(
        vec![],
        vec![0],
        vec![TokenAnnotation { position: 0, negative_ids: NegativeSet::new(vec![0]) }],
    )
    .unwrap();
    let mut baseline_equal = true;
    let mut targeted_distinct = true;
    for method in Method::UPDATE_METHODS {
        let cfg = ObjectiveConfig::new(method).with_penalty(0.0);
        let a = sequence_loss(&scores(&concentrated), &original, &seq, &cfg).unwrap();
        let b = sequence_loss(&scores(&dispersed), &original, &seq, &cfg).unwrap();
        if matches!(method, Method::NlLl | Method::UlLl) {
            baseline_equal &= a == b;
        } else {
            targeted_distinct &= (a - b).abs() > 1e-9;
        }
    }
    let passed = baseline_equal && targeted_distinct;
    report(
        "9 (baselines are dispersion-blind; targeted losses are not)",
        passed,
        format!("baseline losses identical: {baseline_equal}; targeted losses distinct: {targeted_distinct}"),
        started,
    );
    assert!(passed);
}

// ---------------------------------------------------------------------------
// Criteria 7, 8, 10: the full default lexicon pipeline.
// ---------------------------------------------------------------------------

struct Sweep {
    _dir: tempfile::TempDir,
    reports: Vec<EvalReport>,
    reports_csv: Vec<u8>,
    seconds: f64,
}

fn run_default_pipeline(seed: u64) -> (tempfile::TempDir, Vec<EvalReport>, Vec<u8>) {
    let dir = tempfile::tempdir().expect("tempdir");
    let config = ExperimentConfig::default_lexicon(seed);
    let ctx = RunContext::new(config, dir.path().to_path_buf(), 1, false);
    cmd_pipeline(&ctx).expect("pipeline");
    let csv_path = dir.path().join("reports.csv");
    let reports = read_reports(&csv_path).expect("reports");
    let bytes = std::fs::read(&csv_path).expect("reports bytes");
    (dir, reports, bytes)
}

fn sweep() -> &'static Sweep {
    static SWEEP: OnceLock<Sweep> = OnceLock::new();
    SWEEP.get_or_init(|| {
        let started = Instant::now();
        let (dir, reports, reports_csv) = run_default_pipeline(11);
        Sweep { _dir: dir, reports, reports_csv, seconds: started.elapsed().as_secs_f64() }
    })
}

fn is_tnt(name: &str) -> bool {
    Method::parse(name).is_some_and(|m| m.is_targeted())
}

fn is_baseline(name: &str) -> bool {
    Method::parse(name).is_some_and(|m| Method::BASELINE_METHODS.contains(&m))
}

#[test]
fn criterion_7_directional_update_quality() {
    let sweep = sweep();
    let started = Instant::now();
    let test: Vec<&EvalReport> =
        sweep.reports.iter().filter(|r| r.split == "test").collect();
    let original_rate = test
        .iter()
        .find(|r| r.method == "original")
        .expect("original test row")
        .unwanted_rate;
    let cutoff = 0.25 * original_rate;
    let qualifying: Vec<&&EvalReport> =
        test.iter().filter(|r| r.method != "original" && r.unwanted_rate <= cutoff).collect();

    let best = |pred: &dyn Fn(&str) -> bool| -> Option<&EvalReport> {
        qualifying
            .iter()
            .filter(|r| pred(&r.method))
            .max_by(|a, b| a.seq_acc.total_cmp(&b.seq_acc))
            .map(|r| **r)
    };
    let best_tnt = best(&is_tnt).expect("a targeted run reaching a 75% reduction");
    let best_baseline = best(&is_baseline).expect("a baseline run reaching a 75% reduction");
    let best_nl = qualifying
        .iter()
        .filter(|r| r.method == "nl+ll")
        .max_by(|a, b| a.seq_acc.total_cmp(&b.seq_acc))
        .map(|r| **r)
        .expect("an nl+ll run reaching a 75% reduction");

    let acc_ok = best_tnt.seq_acc > best_baseline.seq_acc;
    let tnt_disfluencies = best_tnt.repeats + best_tnt.random_qq;
    let nl_disfluencies = best_nl.repeats + best_nl.random_qq;
    let disfluency_ok = tnt_disfluencies < nl_disfluencies;
    let passed = acc_ok && disfluency_ok && sweep.seconds < 1800.0;
    report(
        "7 (at ≥75% reduction: targeted beats baselines on similarity and disfluencies)",
        passed,
        format!(
            "original rate {original_rate:.2}%; best targeted {} α={:?}: seq acc {:.2} vs best baseline {} α={:?}: {:.2}; disfluencies {} vs nl+ll {} (sweep {:.0}s)",
            best_tnt.method,
            best_tnt.alpha,
            best_tnt.seq_acc,
            best_baseline.method,
            best_baseline.alpha,
            best_baseline.seq_acc,
            tnt_disfluencies,
            nl_disfluencies,
            sweep.seconds
        ),
        started,
    );
    assert!(passed);
}

#[test]
fn criterion_8_composite_frontier_auc() {
    let sweep = sweep();
    let started = Instant::now();
    let curves =
        build_curves(&sweep.reports, tnt_core::eval::SimilarityField::Bleu).expect("curves");
    let auc_of = |name: &str| -> f64 {
        curves
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c.auc)
            .unwrap_or(0.0)
    };
    let tnt_auc = auc_of("tnt-composite");
    let baseline_auc = auc_of("baseline-composite");
    let passed = tnt_auc > baseline_auc;
    report(
        "8 (composite frontier AUC: targeted > baselines)",
        passed,
        format!("{tnt_auc:.1} vs {baseline_auc:.1}"),
        started,
    );
    assert!(passed);
}

#[test]
fn criterion_10_pipeline_determinism() {
    let first = sweep();
    let started = Instant::now();
    let (_dir, _, second_bytes) = run_default_pipeline(11);
    let passed = first.reports_csv == second_bytes;
    report(
        "10 (identical seeds give byte-identical reports.csv)",
        passed,
        format!(
            "{} bytes vs {} bytes, equal: {passed}",
            first.reports_csv.len(),
            second_bytes.len()
        ),
        started,
    );
    assert!(passed);
}
