//! Independent brute-force verifiers.
//!
//! Nothing here shares code with the implementation paths it checks: the
//! projection is verified by grid search over the simplex, model gradients
//! by central finite differences, and the training target by exhaustive
//! enumeration of small sequence spaces. [`run_verification`] bundles the
//! whole suite behind the `verify` CLI subcommand.

use std::collections::HashMap;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::distributions::{
    forward_kl, log_softmax_into, project_out_negatives, reverse_kl, smooth_distribution,
    DistributionError, NegativeSet, TokenDistribution, Vocab,
};
use crate::model::{gradients, SequenceModel, TabularModel, TinyNeuralModel};
use crate::objective::{
    AnnotatedSequence, Method, ObjectiveConfig, PreparedSequence, TokenAnnotation,
};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("every supported token is negated; no feasible point on the grid")]
    InfeasibleConstraint,
    #[error("sequence space too large: {0}")]
    SpaceTooLarge(String),
    #[error("original model puts zero mass on a reachable token (policy support must stay inside the original's)")]
    ZeroOriginalMass,
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Objective(#[from] crate::objective::ObjectiveError),
}

/// Minimize `KL(q ‖ p)` over the barycentric lattice `{q : q_i = k_i/grid}`
/// restricted to `q_i = 0` for `i ∈ neg`, by full enumeration.
///
/// Only meant for tiny instances (`V ≤ 5`, `grid ≤ 200`); the lattice has
/// `C(grid + V − 1, V − 1)` points.
pub fn brute_force_projection(
    p: &TokenDistribution,
    neg: &NegativeSet,
    grid: u32,
) -> Result<TokenDistribution, OracleError> {
    assert!(p.len() <= 5, "brute force projection is exponential in V");
    assert!((1..=200).contains(&grid), "grid must be in 1..=200");
    let kept: Vec<usize> =
        (0..p.len()).filter(|&i| !neg.contains(i as TokenId)).collect();
    if kept.is_empty() {
        return Err(OracleError::InfeasibleConstraint);
    }

    let mut best: Option<(f64, Vec<u32>)> = None;
    let mut counts = vec![0u32; kept.len()];
    search(p, &kept, grid, 0, &mut counts, &mut best);

    let (_, counts) = best.ok_or(OracleError::InfeasibleConstraint)?;
    let mut probs = vec![0.0; p.len()];
    for (slot, &i) in kept.iter().enumerate() {
        probs[i] = counts[slot] as f64 / grid as f64;
    }
    return Ok(TokenDistribution::new_unchecked(probs));

    fn search(
        p: &TokenDistribution,
        kept: &[usize],
        remaining: u32,
        slot: usize,
        counts: &mut Vec<u32>,
        best: &mut Option<(f64, Vec<u32>)>,
    ) {
        if slot == kept.len() - 1 {
            counts[slot] = remaining;
            let grid: u32 = counts.iter().sum();
            let mut kl = 0.0;
            for (s, &i) in kept.iter().enumerate() {
                let q = counts[s] as f64 / grid as f64;
                if q > 0.0 {
                    if p[i] <= 0.0 {
                        return; // infinite divergence; infeasible point
                    }
                    kl += q * (q / p[i]).ln();
                }
            }
            if best.as_ref().map_or(true, |(b, _)| kl < *b) {
                *best = Some((kl, counts.clone()));
            }
            return;
        }
        for c in 0..=remaining {
            counts[slot] = c;
            search(p, kept, remaining - c, slot + 1, counts, best);
        }
    }
}

/// Exhaustive distribution over EOS-terminated sequences of length at most
/// `max_len`; probability mass that has not terminated by `max_len` is
/// reported separately.
#[derive(Debug, Clone)]
pub struct SequenceDistribution {
    /// (sequence, probability) in depth-first token order.
    pub sequences: Vec<(Vec<TokenId>, f64)>,
    pub unterminated_mass: f64,
}

impl SequenceDistribution {
    pub fn terminated_mass(&self) -> f64 {
        self.sequences.iter().map(|(_, p)| p).sum()
    }

    pub fn probability_of(&self, seq: &[TokenId]) -> f64 {
        self.sequences
            .iter()
            .find(|(s, _)| s == seq)
            .map(|&(_, p)| p)
            .unwrap_or(0.0)
    }

    /// Half the ℓ₁ distance between the terminated parts, counting the
    /// unterminated remainders as disjoint mass.
    pub fn total_variation(&self, other: &SequenceDistribution) -> f64 {
        let mut union: HashMap<&[TokenId], (f64, f64)> = HashMap::new();
        for (s, p) in &self.sequences {
            union.entry(s).or_insert((0.0, 0.0)).0 = *p;
        }
        for (s, p) in &other.sequences {
            union.entry(s).or_insert((0.0, 0.0)).1 = *p;
        }
        let mut l1: f64 = union.values().map(|(a, b)| (a - b).abs()).sum();
        l1 += self.unterminated_mass + other.unterminated_mass;
        0.5 * l1
    }
}

fn check_space(vocab_size: usize, max_len: usize) -> Result<(), OracleError> {
    if (vocab_size as f64).powi(max_len as i32) > 1e6 {
        return Err(OracleError::SpaceTooLarge(format!(
            "{vocab_size}^{max_len} sequences"
        )));
    }
    Ok(())
}

/// Chain the model's conditionals over every EOS-terminated sequence up to
/// `max_len`.
pub fn exhaustive_sequence_distribution<M: SequenceModel + ?Sized>(
    model: &M,
    input: &[TokenId],
    max_len: usize,
) -> Result<SequenceDistribution, OracleError> {
    check_space(model.vocab().size(), max_len)?;
    let eos = model.vocab().eos();
    let mut sequences = Vec::new();
    let mut unterminated = 0.0;
    let mut prefix: Vec<TokenId> = Vec::new();
    walk(model, input, eos, max_len, 1.0, &mut prefix, &mut sequences, &mut unterminated);
    return Ok(SequenceDistribution { sequences, unterminated_mass: unterminated });

    #[allow(clippy::too_many_arguments)]
    fn walk<M: SequenceModel + ?Sized>(
        model: &M,
        input: &[TokenId],
        eos: TokenId,
        max_len: usize,
        mass: f64,
        prefix: &mut Vec<TokenId>,
        sequences: &mut Vec<(Vec<TokenId>, f64)>,
        unterminated: &mut f64,
    ) {
        let dist = TokenDistribution::from_scores(&model.next_scores(input, prefix));
        for v in 0..model.vocab().size() as TokenId {
            let p = mass * dist.get(v);
            if p == 0.0 {
                continue;
            }
            prefix.push(v);
            if v == eos {
                sequences.push((prefix.clone(), p));
            } else if prefix.len() == max_len {
                *unterminated += p;
            } else {
                walk(model, input, eos, max_len, p, prefix, sequences, unterminated);
            }
            prefix.pop();
        }
    }
}

/// A leaf of the complete depth-`max_len` generation tree: either
/// EOS-terminated or cut off at `max_len`. Leaf probabilities under a model
/// sum to one exactly.
struct Leaf {
    tokens: Vec<TokenId>,
    log_p_model: f64,
    log_p_original: f64,
    reward_sum: f64,
}

/// Token-level rewards: `rewards[x_{≤t}]` is paid at position `t`; missing
/// prefixes pay zero. `beta` scales the KL regularizer.
#[derive(Debug, Clone)]
pub struct RewardSpec {
    pub beta: f64,
    pub rewards: HashMap<Vec<TokenId>, f64>,
}

impl RewardSpec {
    pub fn new(beta: f64, rewards: HashMap<Vec<TokenId>, f64>) -> Self {
        assert!(beta > 0.0, "beta must be positive");
        assert!(rewards.values().all(|r| r.is_finite()), "rewards must be finite");
        Self { beta, rewards }
    }

    fn at(&self, prefix: &[TokenId]) -> f64 {
        self.rewards.get(prefix).copied().unwrap_or(0.0)
    }
}

fn enumerate_leaves<A, B>(
    model: &A,
    original: &B,
    rewards: &RewardSpec,
    input: &[TokenId],
    max_len: usize,
) -> Result<Vec<Leaf>, OracleError>
where
    A: SequenceModel + ?Sized,
    B: SequenceModel + ?Sized,
{
    check_space(model.vocab().size(), max_len)?;
    let eos = model.vocab().eos();
    let mut leaves = Vec::new();
    let mut prefix = Vec::new();
    walk(model, original, rewards, input, eos, max_len, 0.0, 0.0, 0.0, &mut prefix, &mut leaves)?;
    return Ok(leaves);

    #[allow(clippy::too_many_arguments)]
    fn walk<A, B>(
        model: &A,
        original: &B,
        rewards: &RewardSpec,
        input: &[TokenId],
        eos: TokenId,
        max_len: usize,
        log_p_model: f64,
        log_p_original: f64,
        reward_sum: f64,
        prefix: &mut Vec<TokenId>,
        leaves: &mut Vec<Leaf>,
    ) -> Result<(), OracleError>
    where
        A: SequenceModel + ?Sized,
        B: SequenceModel + ?Sized,
    {
        let d_model = TokenDistribution::from_scores(&model.next_scores(input, prefix));
        let d_orig = TokenDistribution::from_scores(&original.next_scores(input, prefix));
        for v in 0..model.vocab().size() as TokenId {
            let pm = d_model.get(v);
            let po = d_orig.get(v);
            if pm == 0.0 {
                continue; // the model never reaches this leaf
            }
            if po == 0.0 {
                return Err(OracleError::ZeroOriginalMass);
            }
            prefix.push(v);
            let lp_m = log_p_model + pm.ln();
            let lp_o = log_p_original + po.ln();
            let r = reward_sum + rewards.at(prefix);
            if v == eos || prefix.len() == max_len {
                leaves.push(Leaf {
                    tokens: prefix.clone(),
                    log_p_model: lp_m,
                    log_p_original: lp_o,
                    reward_sum: r,
                });
            } else {
                walk(
                    model, original, rewards, input, eos, max_len, lp_m, lp_o, r, prefix,
                    leaves,
                )?;
            }
            prefix.pop();
        }
        Ok(())
    }
}

/// Both sides of the KL-regularized-reward identity.
///
/// `lhs` is the exact (enumerated) value of the token-level objective
/// `E_{x~model}[Σ_t (−r_t/β + log p_model − log p_original)]`; `rhs` is
/// `KL(model ‖ tilted) − log Z`, where the tilted distribution reweights
/// the original by `exp(Σ_t r_t / β)` and `Z` is its normalizer. The two
/// agree up to enumeration precision: maximizing token-level reward with a
/// KL penalty to the original is reverse-KL minimization toward the tilted
/// target.
#[derive(Debug, Clone, Copy)]
pub struct RlEquivalence {
    pub lhs: f64,
    pub rhs: f64,
    pub difference: f64,
    pub log_z: f64,
    pub kl: f64,
}

pub fn token_rl_equivalence_check<A, B>(
    model: &A,
    original: &B,
    rewards: &RewardSpec,
    input: &[TokenId],
    max_len: usize,
) -> Result<RlEquivalence, OracleError>
where
    A: SequenceModel + ?Sized,
    B: SequenceModel + ?Sized,
{
    let leaves = enumerate_leaves(model, original, rewards, input, max_len)?;
    let mut lhs = 0.0;
    let mut z = 0.0;
    for leaf in &leaves {
        let pm = leaf.log_p_model.exp();
        lhs += pm * (-leaf.reward_sum / rewards.beta + leaf.log_p_model - leaf.log_p_original);
        z += leaf.log_p_original.exp() * (leaf.reward_sum / rewards.beta).exp();
    }
    let log_z = z.ln();
    let mut kl = 0.0;
    for leaf in &leaves {
        let pm = leaf.log_p_model.exp();
        if pm > 0.0 {
            let log_tilted = leaf.log_p_original + leaf.reward_sum / rewards.beta - log_z;
            kl += pm * (leaf.log_p_model - log_tilted);
        }
    }
    let rhs = kl - log_z;
    Ok(RlEquivalence { lhs, rhs, difference: (lhs - rhs).abs(), log_z, kl })
}

/// The tilted distribution `∝ original(x)·exp(Σ_t r_t/β)` over the complete
/// leaf space, as an explicit list. As β shrinks with rewards that are 0 on
/// clean prefixes and negative on flagged ones, this converges to the
/// zero-and-renormalize projection of the original.
pub fn reward_tilted_distribution<M>(
    original: &M,
    rewards: &RewardSpec,
    input: &[TokenId],
    max_len: usize,
) -> Result<Vec<(Vec<TokenId>, f64)>, OracleError>
where
    M: SequenceModel + ?Sized,
{
    let leaves = enumerate_leaves(original, original, rewards, input, max_len)?;
    let weights: Vec<f64> = leaves
        .iter()
        .map(|l| l.log_p_original.exp() * (l.reward_sum / rewards.beta).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    Ok(leaves
        .into_iter()
        .zip(weights)
        .map(|(l, w)| (l.tokens, w / z))
        .collect())
}

/// Central-finite-difference gradient of a score-level loss with respect to
/// every model parameter.
pub fn finite_difference_gradient<M, F>(
    model: &M,
    input: &[TokenId],
    output: &[TokenId],
    loss: F,
    step: f64,
) -> Vec<f64>
where
    M: SequenceModel + Clone,
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut probe = model.clone();
    let n = probe.parameters().len();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let saved = probe.parameters()[i];
        probe.parameters_mut()[i] = saved + step;
        let plus = loss(&probe.forward_scores(input, output).expect("forward"));
        probe.parameters_mut()[i] = saved - step;
        let minus = loss(&probe.forward_scores(input, output).expect("forward"));
        probe.parameters_mut()[i] = saved;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Max guarded relative error between the analytic gradient of an objective
/// and central finite differences (denominator floored at 1e-4).
pub fn gradient_check_max_rel_error<M: SequenceModel + Clone>(
    model: &M,
    original_conditionals: &[TokenDistribution],
    seq: &AnnotatedSequence,
    cfg: &ObjectiveConfig,
    fd_step: f64,
) -> Result<f64, OracleError> {
    let prepared = PreparedSequence::prepare(original_conditionals, seq, cfg)?;
    let (_, analytic) = gradients(model, &seq.input, &seq.output, &mut |scores| {
        prepared.loss_and_score_grad(scores)
    })?;
    let numeric = finite_difference_gradient(
        model,
        &seq.input,
        &seq.output,
        |scores| prepared.loss(scores).expect("loss"),
        fd_step,
    );
    let max_rel = analytic
        .values()
        .iter()
        .zip(&numeric)
        .map(|(&a, &f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-4))
        .fold(0.0f64, f64::max);
    Ok(max_rel)
}

/// A randomized objective-gradient test instance: a small neural model, a
/// second model playing the frozen original, and an annotated sequence.
pub struct GradCheckInstance {
    pub model: TinyNeuralModel,
    pub original_conditionals: Vec<TokenDistribution>,
    pub seq: AnnotatedSequence,
    pub cfg: ObjectiveConfig,
}

pub fn random_gradcheck_instance(method: Method, seed: u64) -> GradCheckInstance {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let vocab = Vocab::new(12, 1, 2, 0).expect("vocab");
    let model = TinyNeuralModel::new(vocab.clone(), 5, 8, 2, rng.gen());
    let original = TinyNeuralModel::new(vocab.clone(), 5, 8, 2, rng.gen());
    let content = |rng: &mut ChaCha20Rng| rng.gen_range(3..12) as TokenId;
    let input: Vec<TokenId> = (0..3).map(|_| content(&mut rng)).collect();
    let mut output: Vec<TokenId> = (0..5).map(|_| content(&mut rng)).collect();
    output.push(vocab.eos());
    let mut annotations = Vec::new();
    for t in 0..output.len() - 1 {
        if rng.gen_bool(0.4) {
            let mut ids = vec![output[t]];
            if rng.gen_bool(0.3) {
                ids.push(content(&mut rng));
            }
            annotations.push(TokenAnnotation { position: t, negative_ids: NegativeSet::new(ids) });
        }
    }
    let seq = AnnotatedSequence::new(input.clone(), output.clone(), annotations).expect("seq");
    let original_conditionals =
        crate::model::forward_all(&original, &input, &output).expect("conditionals");
    let alpha = 10f64.powf(rng.gen_range(-2.0..2.0));
    let penalty = *[0.0, 1e-4, 1e-2].choose(&mut rng).unwrap();
    let cfg = ObjectiveConfig::new(method).with_alpha(alpha).with_penalty(penalty);
    GradCheckInstance { model, original_conditionals, seq, cfg }
}

/// One row of the verification report.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, measured: f64, tolerance: f64) -> Self {
        Self { name: name.to_string(), measured, tolerance, passed: measured <= tolerance }
    }
}

fn random_distribution(rng: &mut ChaCha20Rng, len: usize) -> TokenDistribution {
    let raw: Vec<f64> = (0..len).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
    let sum: f64 = raw.iter().sum();
    TokenDistribution::new_unchecked(raw.into_iter().map(|x| x / sum).collect())
}

/// Check agreement of a projection implementation against the grid oracle;
/// parameterized over the implementation so a deliberately corrupted
/// projection can be shown to fail.
pub fn projection_agreement_check(
    project: &dyn Fn(&TokenDistribution, &NegativeSet) -> Result<TokenDistribution, DistributionError>,
    trials: usize,
    grid: u32,
    seed: u64,
) -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let v = rng.gen_range(3..=5usize);
        let p = random_distribution(&mut rng, v);
        let k = rng.gen_range(1..v - 1);
        let neg: NegativeSet =
            rand::seq::index::sample(&mut rng, v, k).iter().map(|i| i as TokenId).collect();
        let exact = match project(&p, &neg) {
            Ok(q) => q,
            Err(_) => continue,
        };
        let coarse = brute_force_projection(&p, &neg, grid).expect("feasible");
        let gap = exact
            .probs()
            .iter()
            .zip(coarse.probs())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(gap);
    }
    CheckResult::new(
        &format!("projection vs grid-{grid} oracle ({trials} trials)"),
        worst,
        1.0 / grid as f64,
    )
}

fn commutativity_check(trials: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut done = 0usize;
    while done < trials {
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
        done += 1;
        let ab = project_out_negatives(&project_out_negatives(&p, &a).unwrap(), &b).unwrap();
        let ba = project_out_negatives(&project_out_negatives(&p, &b).unwrap(), &a).unwrap();
        let direct = project_out_negatives(&p, &union).unwrap();
        for i in 0..v {
            worst = worst.max((ab[i] - direct[i]).abs());
            worst = worst.max((ba[i] - direct[i]).abs());
        }
    }
    CheckResult::new(&format!("projection order independence ({trials} trials)"), worst, 1e-12)
}

fn idempotence_and_ratio_check(trials: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let v = rng.gen_range(3..=8usize);
        let p = random_distribution(&mut rng, v);
        let k = rng.gen_range(1..v - 1);
        let neg: NegativeSet =
            rand::seq::index::sample(&mut rng, v, k).iter().map(|i| i as TokenId).collect();
        let Ok(once) = project_out_negatives(&p, &neg) else { continue };
        let twice = project_out_negatives(&once, &neg).unwrap();
        for i in 0..v {
            worst = worst.max((once[i] - twice[i]).abs());
        }
        for i in 0..v {
            for j in 0..v {
                if !neg.contains(i as TokenId) && !neg.contains(j as TokenId) && p[j] > 1e-3 {
                    let before = p[i] / p[j];
                    let after = once[i] / once[j];
                    worst = worst.max((before - after).abs() / (1.0 + before));
                }
            }
        }
    }
    CheckResult::new(
        &format!("projection idempotence and kept ratios ({trials} trials)"),
        worst,
        1e-12,
    )
}

fn divergence_checks(trials: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut most_negative = 0.0f64;
    let mut worst_identity = 0.0f64;
    let mut worst_smooth = 0.0f64;
    for _ in 0..trials {
        let v = rng.gen_range(2..=8usize);
        let a = random_distribution(&mut rng, v);
        let b = random_distribution(&mut rng, v);
        let logs_b: Vec<f64> = b.probs().iter().map(|&x| x.ln()).collect();
        most_negative = most_negative.max(-forward_kl(&a, &logs_b));
        most_negative = most_negative.max(-reverse_kl(&b, &a).unwrap());
        let logs_a: Vec<f64> = a.probs().iter().map(|&x| x.ln()).collect();
        worst_identity = worst_identity.max(forward_kl(&a, &logs_a));
        worst_identity = worst_identity.max(reverse_kl(&a, &a).unwrap());
        // recompute the smoothing formula independently
        let eps = 10f64.powf(rng.gen_range(-8.0..-2.0));
        let smoothed = smooth_distribution(&a, eps);
        let z = 1.0 + v as f64 * eps;
        for i in 0..v {
            worst_smooth = worst_smooth.max((smoothed[i] - (a[i] + eps) / z).abs());
        }
    }
    vec![
        CheckResult::new(&format!("divergence nonnegativity ({trials} pairs)"), most_negative, 1e-12),
        CheckResult::new(
            &format!("divergence vanishes on identical pairs ({trials} pairs)"),
            worst_identity,
            1e-10,
        ),
        CheckResult::new(&format!("smoothing formula recomputation ({trials} draws)"), worst_smooth, 1e-15),
    ]
}

fn forward_kl_gradient_identity_check(trials: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let v = rng.gen_range(2..=6usize);
        let target = random_distribution(&mut rng, v);
        let scores: Vec<f64> = (0..v).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = |s: &[f64]| {
            let mut logp = vec![0.0; s.len()];
            log_softmax_into(s, &mut logp);
            forward_kl(&target, &logp)
        };
        let probs = TokenDistribution::from_scores(&scores);
        let h = 1e-6;
        for j in 0..v {
            let mut plus = scores.clone();
            plus[j] += h;
            let mut minus = scores.clone();
            minus[j] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            worst = worst.max((fd - (probs[j] - target[j])).abs());
        }
    }
    CheckResult::new(
        &format!("forward-KL score gradient = probs − target ({trials} draws)"),
        worst,
        1e-8,
    )
}

fn objective_gradient_check(per_method: usize, seed: u64) -> CheckResult {
    let mut worst = 0.0f64;
    for (m, method) in Method::UPDATE_METHODS.into_iter().enumerate() {
        for i in 0..per_method {
            let inst =
                random_gradcheck_instance(method, seed ^ ((m as u64) << 32) ^ i as u64);
            let err = gradient_check_max_rel_error(
                &inst.model,
                &inst.original_conditionals,
                &inst.seq,
                &inst.cfg,
                1e-5,
            )
            .expect("gradient check");
            worst = worst.max(err);
        }
    }
    CheckResult::new(
        &format!("objective gradients vs finite differences ({per_method}/method)"),
        worst,
        1e-4,
    )
}

fn tabular_realization_check(trials: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let vocab = Vocab::new(6, 1, 2, 0).expect("vocab");
    let mut worst = 0.0f64;
    for i in 0..trials {
        let mut model = TabularModel::new(vocab.clone(), 2);
        let mut probs = random_distribution(&mut rng, 6).into_probs();
        if rng.gen_bool(0.5) {
            // force exact zeros and renormalize
            probs[rng.gen_range(0..6)] = 0.0;
            let sum: f64 = probs.iter().sum();
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        let target = TokenDistribution::new_unchecked(probs);
        let input = [3 + (i % 3) as TokenId];
        model.set_next_distribution(&input, &[], &target);
        let got = crate::model::forward_all(&model, &input, &[3]).expect("forward").remove(0);
        for v in 0..6 {
            worst = worst.max((got[v] - target[v]).abs());
            if target[v] == 0.0 && got[v] != 0.0 {
                worst = worst.max(1.0); // zeros must be exact
            }
        }
    }
    CheckResult::new(&format!("tabular conditional realization ({trials} draws)"), worst, 1e-9)
}

fn random_tiny_model(rng: &mut ChaCha20Rng, vocab: &Vocab) -> TinyNeuralModel {
    TinyNeuralModel::new(vocab.clone(), 3, 4, 2, rng.gen())
}

fn enumeration_mass_check(trials: usize, seed: u64) -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let vocab = Vocab::new(5, 1, 2, 0).expect("vocab");
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let model = random_tiny_model(&mut rng, &vocab);
        let dist = exhaustive_sequence_distribution(&model, &[3], 5).expect("enumerate");
        worst = worst.max((dist.terminated_mass() + dist.unterminated_mass - 1.0).abs());
    }
    CheckResult::new(
        &format!("sequence enumeration mass conservation ({trials} models)"),
        worst,
        1e-9,
    )
}

fn rl_identity_checks(trials: usize, seed: u64) -> Vec<CheckResult> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let vocab = Vocab::new(5, 1, 2, 0).expect("vocab");
    let max_len = 3;
    let mut worst_diff = 0.0f64;
    let mut worst_zero_reward = 0.0f64;
    let mut worst_optimum = 0.0f64;
    for _ in 0..trials {
        let model = random_tiny_model(&mut rng, &vocab);
        let original = random_tiny_model(&mut rng, &vocab);
        // random rewards on every prefix of the tree
        let mut rewards = HashMap::new();
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
        let eq = token_rl_equivalence_check(&model, &original, &spec, &[3], max_len)
            .expect("identity");
        worst_diff = worst_diff.max(eq.difference);

        // zero rewards: both sides collapse to KL(model ‖ original)
        let zero = RewardSpec::new(0.5, HashMap::new());
        let eq0 =
            token_rl_equivalence_check(&model, &original, &zero, &[3], max_len).expect("zero");
        worst_zero_reward = worst_zero_reward.max(eq0.difference);
        worst_zero_reward = worst_zero_reward.max(eq0.log_z.abs());

        // model == tilted target: the KL side vanishes
        let eq_self =
            token_rl_equivalence_check(&original, &original, &zero, &[3], max_len).expect("self");
        worst_optimum = worst_optimum.max(eq_self.kl.abs());
        worst_optimum = worst_optimum.max((eq_self.lhs + eq_self.log_z).abs());
    }
    vec![
        CheckResult::new(
            &format!("reward-tilt identity, random rewards ({trials} instances)"),
            worst_diff,
            1e-8,
        ),
        CheckResult::new(
            &format!("reward-tilt identity, zero rewards ({trials} instances)"),
            worst_zero_reward,
            1e-10,
        ),
        CheckResult::new(
            &format!("reward-tilt identity at the optimum ({trials} instances)"),
            worst_optimum,
            1e-10,
        ),
    ]
}

fn small_beta_projection_check(seed: u64) -> CheckResult {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let vocab = Vocab::new(5, 1, 2, 0).expect("vocab");
    let bad: TokenId = 4;
    let max_len = 4;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let original = random_tiny_model(&mut rng, &vocab);
        // reward −1 at every position whose prefix contains the flagged token
        let mut rewards = HashMap::new();
        let mut stack: Vec<Vec<TokenId>> = vec![vec![]];
        while let Some(prefix) = stack.pop() {
            if prefix.len() >= max_len {
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
        let spec = RewardSpec::new(0.01, rewards);
        let tilted =
            reward_tilted_distribution(&original, &spec, &[3], max_len).expect("tilt");
        // reference: enumerate the original, zero flagged leaves, renormalize
        let zero = RewardSpec::new(1.0, HashMap::new());
        let leaves = enumerate_leaves(&original, &original, &zero, &[3], max_len).expect("leaves");
        let mut reference: Vec<(Vec<TokenId>, f64)> = leaves
            .iter()
            .map(|l| {
                let p = if l.tokens.contains(&bad) { 0.0 } else { l.log_p_original.exp() };
                (l.tokens.clone(), p)
            })
            .collect();
        let z: f64 = reference.iter().map(|(_, p)| p).sum();
        reference.iter_mut().for_each(|(_, p)| *p /= z);
        let tv: f64 = 0.5
            * tilted
                .iter()
                .zip(&reference)
                .map(|((s, a), (s2, b))| {
                    assert_eq!(s, s2);
                    (a - b).abs()
                })
                .sum::<f64>();
        worst = worst.max(tv);
    }
    CheckResult::new("small-β tilt converges to the projection (β = 0.01)", worst, 0.01)
}

/// The full oracle and invariant suite behind `tnt verify`.
pub fn run_verification(seed: u64) -> Vec<CheckResult> {
    let mut results = vec![
        projection_agreement_check(&|p, n| project_out_negatives(p, n), 150, 200, seed),
        commutativity_check(1000, seed.wrapping_add(1)),
        idempotence_and_ratio_check(500, seed.wrapping_add(2)),
    ];
    results.extend(divergence_checks(1000, seed.wrapping_add(3)));
    results.push(forward_kl_gradient_identity_check(50, seed.wrapping_add(4)));
    results.push(objective_gradient_check(5, seed.wrapping_add(5)));
    results.push(tabular_realization_check(100, seed.wrapping_add(6)));
    results.push(enumeration_mass_check(20, seed.wrapping_add(7)));
    results.extend(rl_identity_checks(25, seed.wrapping_add(8)));
    results.push(small_beta_projection_check(seed.wrapping_add(9)));
    results
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn brute_force_agrees_with_closed_form() {
        let p = TokenDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let q = brute_force_projection(&p, &NegativeSet::new(vec![0]), 200).unwrap();
        assert_eq!(q[0], 0.0);
        assert!((q[1] - 0.6).abs() <= 1.0 / 200.0);
        assert!((q[2] - 0.4).abs() <= 1.0 / 200.0);
    }

    #[test]
    fn brute_force_on_empty_set_returns_grid_nearest() {
        let p = TokenDistribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let q = brute_force_projection(&p, &NegativeSet::empty(), 100).unwrap();
        for i in 0..3 {
            assert!((q[i] - p[i]).abs() <= 1.0 / 100.0);
        }
    }

    #[test]
    fn brute_force_symmetric_case() {
        let p = TokenDistribution::uniform(3);
        let q = brute_force_projection(&p, &NegativeSet::new(vec![1]), 200).unwrap();
        assert_eq!(q[1], 0.0);
        assert!((q[0] - 0.5).abs() <= 1.0 / 200.0);
        assert!((q[2] - 0.5).abs() <= 1.0 / 200.0);
    }

    #[test]
    fn brute_force_infeasible_when_support_negated() {
        let p = TokenDistribution::new(vec![0.5, 0.5, 0.0]).unwrap();
        assert!(matches!(
            brute_force_projection(&p, &NegativeSet::new(vec![0, 1]), 50),
            Err(OracleError::InfeasibleConstraint)
        ));
    }

    #[test]
    fn corrupted_projection_is_caught() {
        // off-by-one in the renormalizer: divide by kept mass plus 0.05
        let corrupted = |p: &TokenDistribution, neg: &NegativeSet| {
            let kept: f64 = p
                .probs()
                .iter()
                .enumerate()
                .filter(|(i, _)| !neg.contains(*i as TokenId))
                .map(|(_, &x)| x)
                .sum();
            let z = kept + 0.05;
            Ok(TokenDistribution::new_unchecked(
                p.probs()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| if neg.contains(i as TokenId) { 0.0 } else { x / z })
                    .collect(),
            ))
        };
        let honest = projection_agreement_check(&|p, n| project_out_negatives(p, n), 50, 100, 7);
        assert!(honest.passed);
        let broken = projection_agreement_check(&corrupted, 50, 100, 7);
        assert!(!broken.passed, "corrupted projection must fail the oracle");
    }

    #[test]
    fn enumeration_matches_chain_rule_by_hand() {
        // uniform conditionals over {pad, bos, eos, a, b} = 5 tokens:
        // P([eos]) = 1/5; P([x, eos]) = 1/25 for x ≠ eos
        let vocab = Vocab::new(5, 1, 2, 0).unwrap();
        let model = TabularModel::new(vocab, 1);
        let dist = exhaustive_sequence_distribution(&model, &[], 2).unwrap();
        assert_abs_diff_eq!(dist.probability_of(&[2]), 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(dist.probability_of(&[3, 2]), 0.04, epsilon = 1e-12);
        assert_abs_diff_eq!(dist.probability_of(&[0, 2]), 0.04, epsilon = 1e-12);
        // 1/5 + 4·(1/25) terminated, the rest unterminated
        assert_abs_diff_eq!(dist.terminated_mass(), 0.2 + 4.0 * 0.04, epsilon = 1e-12);
        assert_abs_diff_eq!(
            dist.terminated_mass() + dist.unterminated_mass,
            1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn enumeration_of_one_hot_eos_model() {
        let vocab = Vocab::new(5, 1, 2, 0).unwrap();
        let mut model = TabularModel::new(vocab.clone(), 1);
        let mut scores = vec![crate::model::ZERO_CONDITIONAL_SCORE; 5];
        scores[vocab.eos() as usize] = 0.0;
        model.set_scores(&[], &[], &scores);
        let dist = exhaustive_sequence_distribution(&model, &[], 3).unwrap();
        assert_eq!(dist.sequences.len(), 1);
        assert_abs_diff_eq!(dist.probability_of(&[2]), 1.0, epsilon = 1e-12);
        assert_eq!(dist.unterminated_mass, 0.0);
    }

    #[test]
    fn space_too_large_is_rejected() {
        let vocab = Vocab::new(32, 1, 2, 0).unwrap();
        let model = TabularModel::new(vocab, 1);
        assert!(matches!(
            exhaustive_sequence_distribution(&model, &[], 5),
            Err(OracleError::SpaceTooLarge(_))
        ));
    }

    #[test]
    fn verification_suite_passes_on_fresh_build() {
        for check in run_verification(0xACCE5) {
            assert!(
                check.passed,
                "{}: measured {:.3e} > tolerance {:.3e}",
                check.name, check.measured, check.tolerance
            );
        }
    }
}
