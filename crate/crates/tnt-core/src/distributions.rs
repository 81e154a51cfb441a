//! Exact simplex-level math.
//!
//! Everything in this module operates on probability vectors over a finite
//! vocabulary in 64-bit floating point. The central operation is
//! [`project_out_negatives`]: zero the probability of a set of unwanted
//! tokens and renormalize. This is the KL-closest distribution to the input
//! among all distributions supported off the negative set, and it preserves
//! the ratios of the kept entries exactly, which is what makes negative
//! updates commutative (applying negative sets in any order, or their union,
//! yields the same result).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::TokenId;

/// Kept mass below this is treated as "the whole support was negated".
pub const TOTAL_MASS_REMOVED_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    /// Every token carrying probability mass was marked negative; there is
    /// no valid renormalization. Callers decide whether to skip the
    /// position or abort.
    #[error("projection removed all probability mass (kept {kept:.3e})")]
    TotalMassRemoved { kept: f64 },
    /// Reverse KL needs a strictly positive target; smooth it first.
    #[error("reverse KL target has a non-positive entry at index {index}")]
    TargetNotPositive { index: usize },
    #[error("invalid probability vector: {0}")]
    InvalidDistribution(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

/// The token alphabet.
///
/// All distributions in the crate are vectors of length `size`. The three
/// reserved ids must be distinct and in range; at least two non-reserved
/// tokens must remain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    bos: TokenId,
    eos: TokenId,
    pad: TokenId,
    /// Optional display string per id, for readable dumps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    display: Option<Vec<String>>,
}

impl Vocab {
    pub fn new(size: usize, bos: TokenId, eos: TokenId, pad: TokenId) -> Result<Self, DistributionError> {
        let reserved = [bos, eos, pad];
        if reserved.iter().any(|&id| id as usize >= size) {
            return Err(DistributionError::InvalidVocab(format!(
                "reserved id out of range for size {size}"
            )));
        }
        if bos == eos || bos == pad || eos == pad {
            return Err(DistributionError::InvalidVocab("reserved ids must be distinct".into()));
        }
        if size < reserved.len() + 2 {
            return Err(DistributionError::InvalidVocab(format!(
                "need at least 2 tokens beyond the reserved ones, got size {size}"
            )));
        }
        Ok(Self { size, bos, eos, pad, display: None })
    }

    pub fn with_display(mut self, display: Vec<String>) -> Self {
        self.display = Some(display);
        self
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn pad(&self) -> TokenId {
        self.pad
    }

    pub fn is_reserved(&self, id: TokenId) -> bool {
        id == self.bos || id == self.eos || id == self.pad
    }

    pub fn contains(&self, id: TokenId) -> bool {
        (id as usize) < self.size
    }

    pub fn display(&self, id: TokenId) -> Option<&str> {
        self.display.as_ref().and_then(|d| d.get(id as usize)).map(String::as_str)
    }
}

/// A probability vector over the vocabulary: entries nonnegative, summing
/// to one within 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    probs: Vec<f64>,
}

impl TokenDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, DistributionError> {
        if probs.len() < 2 {
            return Err(DistributionError::InvalidDistribution(format!(
                "need at least 2 entries, got {}",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(DistributionError::InvalidDistribution(format!(
                    "entry {i} is {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DistributionError::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Construct without validation. Internal constructors that normalize
    /// exactly (softmax, projection, smoothing) use this.
    pub(crate) fn new_unchecked(probs: Vec<f64>) -> Self {
        Self { probs }
    }

    pub fn uniform(len: usize) -> Self {
        Self { probs: vec![1.0 / len as f64; len] }
    }

    /// Normalized exponential of a score vector, max-shifted for stability.
    pub fn from_scores(scores: &[f64]) -> Self {
        let mut probs = vec![0.0; scores.len()];
        softmax_into(scores, &mut probs);
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    pub fn get(&self, id: TokenId) -> f64 {
        self.probs[id as usize]
    }

    /// Index of the largest entry, lowest id on ties.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }
}

impl std::ops::Index<usize> for TokenDistribution {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.probs[i]
    }
}

/// A set of token ids judged unacceptable at some position. May be empty.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NegativeSet {
    ids: Vec<TokenId>,
}

impl NegativeSet {
    pub fn new(mut ids: Vec<TokenId>) -> Self {
        ids.sort_unstable();
        ids.dedup();
        Self { ids }
    }

    pub fn empty() -> Self {
        Self { ids: Vec::new() }
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.ids.binary_search(&id).is_ok()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn union(&self, other: &NegativeSet) -> NegativeSet {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        NegativeSet::new(ids)
    }

    /// True if every id is a valid token of `vocab`.
    pub fn fits(&self, vocab: &Vocab) -> bool {
        self.ids.iter().all(|&id| vocab.contains(id))
    }
}

impl FromIterator<TokenId> for NegativeSet {
    fn from_iter<I: IntoIterator<Item = TokenId>>(iter: I) -> Self {
        NegativeSet::new(iter.into_iter().collect())
    }
}

/// Zero the entries in `neg` and renormalize the rest.
///
/// The result is the KL-closest distribution to `p` (minimizing
/// `KL(q ‖ p)`) among distributions with `q_i = 0` for every `i` in `neg`;
/// kept entries keep their mutual ratios exactly. Errors with
/// [`DistributionError::TotalMassRemoved`] when the kept mass falls below
/// [`TOTAL_MASS_REMOVED_THRESHOLD`].
pub fn project_out_negatives(
    p: &TokenDistribution,
    neg: &NegativeSet,
) -> Result<TokenDistribution, DistributionError> {
    if neg.is_empty() {
        return Ok(p.clone());
    }
    let mut kept = 0.0;
    for (i, &pi) in p.probs.iter().enumerate() {
        if !neg.contains(i as TokenId) {
            kept += pi;
        }
    }
    if kept < TOTAL_MASS_REMOVED_THRESHOLD {
        return Err(DistributionError::TotalMassRemoved { kept });
    }
    let probs = p
        .probs
        .iter()
        .enumerate()
        .map(|(i, &pi)| if neg.contains(i as TokenId) { 0.0 } else { pi / kept })
        .collect();
    Ok(TokenDistribution::new_unchecked(probs))
}

/// Mix `p` with the uniform distribution: `(p_i + eps) / (1 + V·eps)`.
///
/// Produces a strictly positive vector; used to make reverse KL finite
/// against targets with exact zeros.
pub fn smooth_distribution(p: &TokenDistribution, eps: f64) -> TokenDistribution {
    assert!(eps > 0.0, "smoothing epsilon must be positive");
    let z = 1.0 + p.len() as f64 * eps;
    let probs = p.probs.iter().map(|&pi| (pi + eps) / z).collect();
    TokenDistribution::new_unchecked(probs)
}

/// `KL(target ‖ model)` with the model given in log space.
///
/// `model_log_probs` must be a normalized log-distribution (its log-sum-exp
/// is 0 within 1e-6); taking it in log space keeps the divergence finite
/// even when the model's probabilities underflow to zero. Entries of the
/// target that are exactly zero contribute nothing (`0·log 0 := 0`).
pub fn forward_kl(target: &TokenDistribution, model_log_probs: &[f64]) -> f64 {
    debug_assert_eq!(target.len(), model_log_probs.len());
    debug_assert!(log_sum_exp(model_log_probs).abs() < 1e-6, "model log-probs not normalized");
    let mut kl = 0.0;
    for (&t, &lq) in target.probs.iter().zip(model_log_probs) {
        if t > 0.0 {
            kl += t * (t.ln() - lq);
        }
    }
    kl.max(0.0)
}

/// `KL(model ‖ target)` for a strictly positive target.
pub fn reverse_kl(
    target: &TokenDistribution,
    model_probs: &TokenDistribution,
) -> Result<f64, DistributionError> {
    debug_assert_eq!(target.len(), model_probs.len());
    if let Some(index) = target.probs.iter().position(|&t| t <= 0.0) {
        return Err(DistributionError::TargetNotPositive { index });
    }
    let mut kl = 0.0;
    for (&t, &m) in target.probs.iter().zip(&model_probs.probs) {
        if m > 0.0 {
            kl += m * (m.ln() - t.ln());
        }
    }
    Ok(kl.max(0.0))
}

/// Negative-likelihood token loss: the (signed) log-probability of the
/// negative token, so that descending pushes the probability down.
/// Unbounded below as the probability approaches zero.
pub fn nl_token_loss(log_prob_of_negative_token: f64) -> f64 {
    log_prob_of_negative_token
}

/// Unlikelihood token loss `−log(1 − p)`, with `1 − p` clamped from below
/// so the loss stays finite as `p → 1`.
pub fn ul_token_loss(prob_of_negative_token: f64, clamp: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&prob_of_negative_token));
    debug_assert!(clamp > 0.0 && clamp < 1.0);
    -((1.0 - prob_of_negative_token).max(clamp)).ln()
}

/// Log-likelihood token loss `−log p` of the realized token.
pub fn ll_token_loss(log_prob_of_realized_token: f64) -> f64 {
    -log_prob_of_realized_token
}

/// Max-shifted log-sum-exp.
pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = scores.iter().map(|&s| (s - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `scores` into `out`; returns the log-sum-exp.
pub fn softmax_into(scores: &[f64], out: &mut [f64]) -> f64 {
    debug_assert_eq!(scores.len(), out.len());
    let lse = log_sum_exp(scores);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    lse
}

/// Log-softmax of `scores` into `out` (`s_i − logsumexp(s)`).
pub fn log_softmax_into(scores: &[f64], out: &mut [f64]) -> f64 {
    let lse = log_sum_exp(scores);
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = s - lse;
    }
    lse
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::{prop_assert, prop_assume, proptest};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn dist(p: &[f64]) -> TokenDistribution {
        TokenDistribution::new(p.to_vec()).unwrap()
    }

    fn neg(ids: &[TokenId]) -> NegativeSet {
        NegativeSet::new(ids.to_vec())
    }

    fn random_dist(rng: &mut impl Rng, len: usize) -> TokenDistribution {
        // Dirichlet(1) via normalized exponentials.
        let raw: Vec<f64> = (0..len).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
        let sum: f64 = raw.iter().sum();
        TokenDistribution::new_unchecked(raw.into_iter().map(|x| x / sum).collect())
    }

    #[test]
    fn vocab_rejects_bad_reserved_ids() {
        assert!(Vocab::new(6, 0, 1, 2).is_ok());
        assert!(Vocab::new(6, 0, 0, 2).is_err());
        assert!(Vocab::new(6, 0, 1, 9).is_err());
        assert!(Vocab::new(4, 0, 1, 2).is_err()); // only one non-reserved token left
    }

    #[test]
    fn projection_empty_set_is_identity() {
        let p = dist(&[0.25, 0.25, 0.25, 0.25]);
        let q = project_out_negatives(&p, &NegativeSet::empty()).unwrap();
        assert_eq!(q.probs(), p.probs());
    }

    #[test]
    fn projection_uniform_drops_one() {
        let p = dist(&[0.25, 0.25, 0.25, 0.25]);
        let q = project_out_negatives(&p, &neg(&[0])).unwrap();
        assert_eq!(q[0], 0.0);
        for i in 1..4 {
            assert_abs_diff_eq!(q[i], 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn projection_renormalizes_kept_mass() {
        let p = dist(&[0.5, 0.3, 0.2]);
        let q = project_out_negatives(&p, &neg(&[0])).unwrap();
        assert_eq!(q[0], 0.0);
        assert_abs_diff_eq!(q[1], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(q[2], 0.4, epsilon = 1e-15);
    }

    #[test]
    fn projection_total_mass_removed() {
        let p = dist(&[0.5, 0.5, 0.0]);
        let err = project_out_negatives(&p, &neg(&[0, 1])).unwrap_err();
        assert!(matches!(err, DistributionError::TotalMassRemoved { .. }));
    }

    #[test]
    fn smoothing_uniform_fixed_point() {
        let p = TokenDistribution::uniform(5);
        let q = smooth_distribution(&p, 1e-3);
        for i in 0..5 {
            assert_abs_diff_eq!(q[i], 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn smoothing_matches_formula() {
        let p = dist(&[1.0, 0.0, 0.0]);
        let eps = 1e-6;
        let q = smooth_distribution(&p, eps);
        let z = 1.0 + 3.0 * eps;
        assert_abs_diff_eq!(q[0], (1.0 + eps) / z, epsilon = 1e-18);
        assert_abs_diff_eq!(q[1], eps / z, epsilon = 1e-18);
        assert_abs_diff_eq!(q[2], eps / z, epsilon = 1e-18);
    }

    #[test]
    fn smoothing_of_projected_stays_close() {
        let p = dist(&[0.0, 0.6, 0.4]);
        let q = smooth_distribution(&p, 1e-6);
        let sum: f64 = q.probs().iter().sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        for i in 0..3 {
            assert!(q[i] > 0.0);
            assert!((q[i] - p[i]).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_kl_identity_is_zero() {
        let p = dist(&[0.3, 0.45, 0.25]);
        let logs: Vec<f64> = p.probs().iter().map(|&x| x.ln()).collect();
        assert_abs_diff_eq!(forward_kl(&p, &logs), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn forward_kl_point_mass_vs_uniform() {
        let target = dist(&[1.0, 0.0]);
        let logs = vec![0.5f64.ln(), 0.5f64.ln()];
        assert_abs_diff_eq!(forward_kl(&target, &logs), 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn forward_kl_projected_target_vs_uniform() {
        // Independent evaluation of the defining sum:
        // 0.6·log(0.6/(1/3)) + 0.4·log(0.4/(1/3)) = 0.6·log 1.8 + 0.4·log 1.2
        let target = dist(&[0.0, 0.6, 0.4]);
        let third: f64 = 1.0 / 3.0;
        let logs = vec![third.ln(); 3];
        let expected = 0.6 * 1.8f64.ln() + 0.4 * 1.2f64.ln();
        assert_abs_diff_eq!(forward_kl(&target, &logs), expected, epsilon = 1e-12);
    }

    #[test]
    fn reverse_kl_identity_and_point_mass() {
        let p = dist(&[0.5, 0.5]);
        assert_abs_diff_eq!(reverse_kl(&p, &p).unwrap(), 0.0, epsilon = 1e-12);
        let model = dist(&[1.0, 0.0]);
        assert_abs_diff_eq!(reverse_kl(&p, &model).unwrap(), 2.0f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn reverse_kl_rejects_zero_target() {
        let target = dist(&[0.0, 1.0]);
        let model = dist(&[0.5, 0.5]);
        assert!(matches!(
            reverse_kl(&target, &model),
            Err(DistributionError::TargetNotPositive { index: 0 })
        ));
    }

    #[test]
    fn reverse_kl_smoothed_target_matches_independent_sum() {
        let target = smooth_distribution(&dist(&[0.0, 0.6, 0.4]), 1e-6);
        let model = TokenDistribution::uniform(3);
        let mut expected = 0.0;
        for i in 0..3 {
            expected += model[i] * (model[i].ln() - target[i].ln());
        }
        assert_abs_diff_eq!(reverse_kl(&target, &model).unwrap(), expected, epsilon = 1e-10);
    }

    #[test]
    fn token_losses_closed_forms() {
        assert_eq!(nl_token_loss(0.0), 0.0);
        assert_abs_diff_eq!(nl_token_loss(0.5f64.ln()), -0.693147, epsilon = 1e-5);
        assert_abs_diff_eq!(nl_token_loss(1e-8f64.ln()), -18.4207, epsilon = 1e-3);

        assert_eq!(ul_token_loss(0.0, 1e-9), 0.0);
        assert_abs_diff_eq!(ul_token_loss(0.5, 1e-9), 2.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ul_token_loss(1.0, 1e-9), -(1e-9f64.ln()), epsilon = 1e-9);
        assert_abs_diff_eq!(ul_token_loss(1.0, 1e-9), 20.7232, epsilon = 1e-3);

        assert_eq!(ll_token_loss(0.0), 0.0);
        assert_abs_diff_eq!(ll_token_loss(0.25f64.ln()), 4.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ll_token_loss(-3.0), 3.0, epsilon = 1e-15);
    }

    #[test]
    fn divergences_zero_iff_equal_on_random_pairs() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let len = rng.gen_range(2..=6);
            let a = random_dist(&mut rng, len);
            let b = random_dist(&mut rng, len);
            let logs_b: Vec<f64> = b.probs().iter().map(|&x| x.ln()).collect();
            let fkl = forward_kl(&a, &logs_b);
            let rkl = reverse_kl(&b, &a).unwrap();
            assert!(fkl >= 0.0);
            assert!(rkl >= 0.0);
            let max_gap = a
                .probs()
                .iter()
                .zip(b.probs())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            if fkl < 1e-10 || rkl < 1e-10 {
                assert!(max_gap < 1e-4, "near-zero divergence for distinct distributions");
            }
            let logs_a: Vec<f64> = a.probs().iter().map(|&x| x.ln()).collect();
            assert!(forward_kl(&a, &logs_a) < 1e-12);
            assert!(reverse_kl(&a, &a).unwrap() < 1e-12);
        }
    }

    #[test]
    fn forward_kl_score_gradient_is_probs_minus_target() {
        // d/ds KL(target ‖ softmax(s)) = softmax(s) − target, by central
        // finite differences.
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..50 {
            let len = rng.gen_range(2..=6);
            let target = random_dist(&mut rng, len);
            let scores: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let f = |s: &[f64]| {
                let mut logp = vec![0.0; s.len()];
                log_softmax_into(s, &mut logp);
                forward_kl(&target, &logp)
            };
            let probs = TokenDistribution::from_scores(&scores);
            let h = 1e-6;
            for j in 0..len {
                let mut plus = scores.clone();
                plus[j] += h;
                let mut minus = scores.clone();
                minus[j] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let analytic = probs[j] - target[j];
                assert!(
                    (fd - analytic).abs() < 1e-8,
                    "gradient mismatch: fd={fd}, analytic={analytic}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn projection_idempotent(seed in 0u64..5000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let len = rng.gen_range(3..=8);
            let p = random_dist(&mut rng, len);
            let k = rng.gen_range(1..len - 1);
            let ids: Vec<TokenId> = rand::seq::index::sample(&mut rng, len, k)
                .iter()
                .map(|i| i as TokenId)
                .collect();
            let a = NegativeSet::new(ids);
            if let Ok(once) = project_out_negatives(&p, &a) {
                let twice = project_out_negatives(&once, &a).unwrap();
                for i in 0..len {
                    prop_assert!((once[i] - twice[i]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn projection_commutes_and_matches_union(seed in 0u64..5000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let len = rng.gen_range(3..=8);
            let p = random_dist(&mut rng, len);
            let pick = |rng: &mut ChaCha20Rng| -> NegativeSet {
                let k = rng.gen_range(0..len - 1);
                rand::seq::index::sample(rng, len, k).iter().map(|i| i as TokenId).collect()
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
            prop_assume!(kept > 1e-6);
            let ab = project_out_negatives(&project_out_negatives(&p, &a).unwrap(), &b).unwrap();
            let ba = project_out_negatives(&project_out_negatives(&p, &b).unwrap(), &a).unwrap();
            let direct = project_out_negatives(&p, &union).unwrap();
            for i in 0..len {
                prop_assert!((ab[i] - direct[i]).abs() <= 1e-12);
                prop_assert!((ba[i] - direct[i]).abs() <= 1e-12);
            }
        }

        #[test]
        fn projection_preserves_kept_ratios(seed in 0u64..5000) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(42));
            let len = rng.gen_range(3..=8);
            let p = random_dist(&mut rng, len);
            let k = rng.gen_range(1..len - 1);
            let a: NegativeSet =
                rand::seq::index::sample(&mut rng, len, k).iter().map(|i| i as TokenId).collect();
            if let Ok(q) = project_out_negatives(&p, &a) {
                for i in 0..len {
                    for j in 0..len {
                        if !a.contains(i as TokenId) && !a.contains(j as TokenId) && p[j] > 0.0 {
                            let before = p[i] / p[j];
                            let after = q[i] / q[j];
                            prop_assert!((before - after).abs() <= 1e-12 * (1.0 + before.abs()));
                        }
                    }
                }
            }
        }
    }
}
