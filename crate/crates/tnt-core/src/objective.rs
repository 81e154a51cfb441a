//! Per-sequence training losses.
//!
//! Every method walks the output positions of an annotated sequence. At an
//! annotated position the negative-branch loss applies, scaled by `alpha`;
//! everywhere else the positive-branch loss applies. The targeted-update
//! methods aim each position at a target distribution — the original
//! conditional with the annotated negative tokens projected out (or the
//! original itself where nothing is annotated) — while the baselines only
//! look at the probability of the realized token. Every position of every
//! method additionally pays `coeff · logsumexp(scores)²`, which anchors the
//! score normalizer.
//!
//! Positions after a negative position stay in the loss: constraining the
//! conditionals that follow an excluded token still pulls the model toward
//! the original.
//!
//! Losses are evaluated from raw score vectors so they stay differentiable;
//! [`PreparedSequence`] precomputes the per-position targets (they depend
//! only on the frozen original model and the annotations) and then serves
//! both plain evaluation and evaluation with analytic score gradients.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{
    log_softmax_into, project_out_negatives, smooth_distribution, DistributionError, NegativeSet,
    TokenDistribution, Vocab,
};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("expected {expected} per-position entries, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("invalid annotated sequence: {0}")]
    InvalidSequence(String),
}

/// Marks the token(s) unacceptable at one output position given its prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAnnotation {
    pub position: usize,
    pub negative_ids: NegativeSet,
}

/// Input tokens, output tokens, and per-position negative sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedSequence {
    pub input: Vec<TokenId>,
    pub output: Vec<TokenId>,
    pub annotations: Vec<TokenAnnotation>,
}

impl AnnotatedSequence {
    pub fn new(
        input: Vec<TokenId>,
        output: Vec<TokenId>,
        annotations: Vec<TokenAnnotation>,
    ) -> Result<Self, ObjectiveError> {
        if output.is_empty() {
            return Err(ObjectiveError::InvalidSequence("empty output".into()));
        }
        let mut prev: Option<usize> = None;
        for a in &annotations {
            if a.position >= output.len() {
                return Err(ObjectiveError::InvalidSequence(format!(
                    "annotation position {} beyond output length {}",
                    a.position,
                    output.len()
                )));
            }
            if a.negative_ids.is_empty() {
                return Err(ObjectiveError::InvalidSequence(format!(
                    "empty negative set at position {}",
                    a.position
                )));
            }
            if let Some(p) = prev {
                if a.position <= p {
                    return Err(ObjectiveError::InvalidSequence(
                        "annotation positions must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(a.position);
        }
        Ok(Self { input, output, annotations })
    }

    pub fn unannotated(input: Vec<TokenId>, output: Vec<TokenId>) -> Result<Self, ObjectiveError> {
        Self::new(input, output, Vec::new())
    }

    /// True if every token and negative id fits the vocabulary.
    pub fn fits(&self, vocab: &Vocab) -> bool {
        self.input.iter().chain(&self.output).all(|&t| vocab.contains(t))
            && self.annotations.iter().all(|a| a.negative_ids.fits(vocab))
    }

    pub fn negative_set_at(&self, position: usize) -> Option<&NegativeSet> {
        self.annotations
            .iter()
            .find(|a| a.position == position)
            .map(|a| &a.negative_ids)
    }
}

/// The seven update methods plus plain log-likelihood for base training.
///
/// The two-letter suffix of the targeted methods names the divergence used
/// at (negative, positive) positions: `F` = forward KL to the target,
/// `R` = reverse KL against the smoothed target. The `+LL` variants keep
/// the targeted loss on negative positions but use the realized token's
/// negative log-likelihood on positive positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "tn-ff")]
    TnFf,
    #[serde(rename = "tn-rr")]
    TnRr,
    #[serde(rename = "tn-rf")]
    TnRf,
    #[serde(rename = "tn-f+ll")]
    TnFLl,
    #[serde(rename = "tn-r+ll")]
    TnRLl,
    #[serde(rename = "nl+ll")]
    NlLl,
    #[serde(rename = "ul+ll")]
    UlLl,
    #[serde(rename = "ll")]
    Ll,
}

impl Method {
    pub const UPDATE_METHODS: [Method; 7] = [
        Method::TnFf,
        Method::TnRr,
        Method::TnRf,
        Method::TnFLl,
        Method::TnRLl,
        Method::NlLl,
        Method::UlLl,
    ];

    pub const TNT_METHODS: [Method; 5] =
        [Method::TnFf, Method::TnRr, Method::TnRf, Method::TnFLl, Method::TnRLl];

    pub const BASELINE_METHODS: [Method; 2] = [Method::NlLl, Method::UlLl];

    pub fn name(&self) -> &'static str {
        match self {
            Method::TnFf => "tn-ff",
            Method::TnRr => "tn-rr",
            Method::TnRf => "tn-rf",
            Method::TnFLl => "tn-f+ll",
            Method::TnRLl => "tn-r+ll",
            Method::NlLl => "nl+ll",
            Method::UlLl => "ul+ll",
            Method::Ll => "ll",
        }
    }

    pub fn is_targeted(&self) -> bool {
        matches!(
            self,
            Method::TnFf | Method::TnRr | Method::TnRf | Method::TnFLl | Method::TnRLl
        )
    }

    pub fn parse(s: &str) -> Option<Method> {
        let all = [
            Method::TnFf,
            Method::TnRr,
            Method::TnRf,
            Method::TnFLl,
            Method::TnRLl,
            Method::NlLl,
            Method::UlLl,
            Method::Ll,
        ];
        all.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// What to do when a projection removes the whole support of a conditional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MassRemovedPolicy {
    /// Drop the position from the loss; the trainer reports how many
    /// positions were skipped. A fully-negated support has no valid target,
    /// and aborting a run for one position is disproportionate.
    #[default]
    SkipPosition,
    /// Propagate the error and abort.
    Fail,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub method: Method,
    /// Weight on the negative-position losses.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Added to every entry of a reverse-KL target before renormalizing.
    #[serde(default = "default_smoothing_eps")]
    pub smoothing_eps: f64,
    /// Floor on `1 − p` inside the unlikelihood loss.
    #[serde(default = "default_ul_clamp")]
    pub ul_clamp: f64,
    /// Coefficient on the squared logsumexp of the scores, per position.
    #[serde(default = "default_logit_penalty")]
    pub logit_penalty_coeff: f64,
    #[serde(default)]
    pub mass_removed_policy: MassRemovedPolicy,
}

fn default_alpha() -> f64 {
    1.0
}
fn default_smoothing_eps() -> f64 {
    1e-6
}
fn default_ul_clamp() -> f64 {
    1e-9
}
fn default_logit_penalty() -> f64 {
    1e-4
}

impl ObjectiveConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            alpha: default_alpha(),
            smoothing_eps: default_smoothing_eps(),
            ul_clamp: default_ul_clamp(),
            logit_penalty_coeff: default_logit_penalty(),
            mass_removed_policy: MassRemovedPolicy::default(),
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_penalty(mut self, coeff: f64) -> Self {
        self.logit_penalty_coeff = coeff;
        self
    }
}

/// Target conditional for one position: the original when nothing is
/// annotated, otherwise the original with the negative set projected out.
pub fn target_distribution(
    original: &TokenDistribution,
    neg: Option<&NegativeSet>,
) -> Result<TokenDistribution, DistributionError> {
    match neg {
        None => Ok(original.clone()),
        Some(set) if set.is_empty() => Ok(original.clone()),
        Some(set) => project_out_negatives(original, set),
    }
}

enum BranchPlan {
    /// Forward KL to `target`; `entropy_term` caches Σ t·ln t.
    Forward { target: Vec<f64>, entropy_term: f64 },
    /// Reverse KL against the smoothed target, cached in log space.
    Reverse { log_target: Vec<f64> },
    /// −log p of the realized token.
    LogLikelihood,
    /// +log p of the realized token (descending pushes it down).
    NegLikelihood,
    /// −log(1 − p) of the realized token, clamped.
    Unlikelihood,
    /// Position dropped by the mass-removed policy.
    Skip,
}

struct PositionPlan {
    branch: BranchPlan,
    /// `alpha` at annotated positions, 1 elsewhere.
    weight: f64,
    realized: TokenId,
}

/// A sequence with its per-position loss plans baked: targets projected,
/// smoothed, and logged once. Depends only on the frozen original model's
/// conditionals, so trainers cache it across steps.
pub struct PreparedSequence {
    plans: Vec<PositionPlan>,
    skipped_positions: usize,
    penalty_coeff: f64,
    ul_clamp: f64,
}

impl PreparedSequence {
    pub fn prepare(
        original: &[TokenDistribution],
        seq: &AnnotatedSequence,
        cfg: &ObjectiveConfig,
    ) -> Result<Self, ObjectiveError> {
        if original.len() != seq.output.len() {
            return Err(ObjectiveError::LengthMismatch {
                expected: seq.output.len(),
                got: original.len(),
            });
        }
        let mut plans = Vec::with_capacity(seq.output.len());
        let mut skipped = 0usize;
        for (t, (&realized, orig)) in seq.output.iter().zip(original).enumerate() {
            let neg = seq.negative_set_at(t);
            let annotated = neg.is_some();
            let weight = if annotated { cfg.alpha } else { 1.0 };
            let branch = if annotated {
                match cfg.method {
                    Method::NlLl => BranchPlan::NegLikelihood,
                    Method::UlLl => BranchPlan::Unlikelihood,
                    Method::Ll => BranchPlan::LogLikelihood,
                    Method::TnFf | Method::TnFLl => {
                        match targeted_branch(orig, neg, cfg, true)? {
                            Some(b) => b,
                            None => {
                                skipped += 1;
                                BranchPlan::Skip
                            }
                        }
                    }
                    Method::TnRr | Method::TnRf | Method::TnRLl => {
                        match targeted_branch(orig, neg, cfg, false)? {
                            Some(b) => b,
                            None => {
                                skipped += 1;
                                BranchPlan::Skip
                            }
                        }
                    }
                }
            } else {
                match cfg.method {
                    Method::TnFf | Method::TnRf => forward_plan(orig),
                    Method::TnRr => reverse_plan(orig, cfg.smoothing_eps),
                    Method::TnFLl
                    | Method::TnRLl
                    | Method::NlLl
                    | Method::UlLl
                    | Method::Ll => BranchPlan::LogLikelihood,
                }
            };
            let weight = if matches!(cfg.method, Method::Ll) { 1.0 } else { weight };
            plans.push(PositionPlan { branch, weight, realized });
        }
        Ok(Self {
            plans,
            skipped_positions: skipped,
            penalty_coeff: cfg.logit_penalty_coeff,
            ul_clamp: cfg.ul_clamp,
        })
    }

    pub fn len(&self) -> usize {
        self.plans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.plans.is_empty()
    }

    /// Positions dropped because projection removed all mass.
    pub fn skipped_positions(&self) -> usize {
        self.skipped_positions
    }

    /// Loss value for the given per-position score vectors.
    pub fn loss(&self, model_scores: &[Vec<f64>]) -> Result<f64, ObjectiveError> {
        self.evaluate(model_scores, None)
    }

    /// Loss value plus `d loss / d scores` for every position.
    pub fn loss_and_score_grad(
        &self,
        model_scores: &[Vec<f64>],
    ) -> Result<(f64, Vec<Vec<f64>>), ObjectiveError> {
        let mut grads: Vec<Vec<f64>> =
            model_scores.iter().map(|s| vec![0.0; s.len()]).collect();
        let value = self.evaluate(model_scores, Some(&mut grads))?;
        Ok((value, grads))
    }

    fn evaluate(
        &self,
        model_scores: &[Vec<f64>],
        mut grads: Option<&mut Vec<Vec<f64>>>,
    ) -> Result<f64, ObjectiveError> {
        if model_scores.len() != self.plans.len() {
            return Err(ObjectiveError::LengthMismatch {
                expected: self.plans.len(),
                got: model_scores.len(),
            });
        }
        let mut total = 0.0;
        let mut log_probs: Vec<f64> = Vec::new();
        let mut probs: Vec<f64> = Vec::new();
        for (t, (plan, scores)) in self.plans.iter().zip(model_scores).enumerate() {
            if matches!(plan.branch, BranchPlan::Skip) {
                continue;
            }
            let v = scores.len();
            log_probs.resize(v, 0.0);
            probs.resize(v, 0.0);
            let lse = log_softmax_into(scores, &mut log_probs);
            for (p, &lp) in probs.iter_mut().zip(&log_probs) {
                *p = lp.exp();
            }
            let x = plan.realized as usize;
            let w = plan.weight;
            let grad_row = grads.as_deref_mut().map(|g| &mut g[t]);
            let branch_value = match &plan.branch {
                BranchPlan::Forward { target, entropy_term } => {
                    let mut cross = 0.0;
                    for (&ti, &lp) in target.iter().zip(&log_probs) {
                        if ti > 0.0 {
                            cross += ti * lp;
                        }
                    }
                    if let Some(g) = grad_row {
                        for i in 0..v {
                            g[i] += w * (probs[i] - target[i]);
                        }
                    }
                    (entropy_term - cross).max(0.0)
                }
                BranchPlan::Reverse { log_target } => {
                    let mut kl = 0.0;
                    for i in 0..v {
                        if probs[i] > 0.0 {
                            kl += probs[i] * (log_probs[i] - log_target[i]);
                        }
                    }
                    let kl = kl.max(0.0);
                    if let Some(g) = grad_row {
                        for i in 0..v {
                            if probs[i] > 0.0 {
                                g[i] += w * probs[i] * ((log_probs[i] - log_target[i]) - kl);
                            }
                        }
                    }
                    kl
                }
                BranchPlan::LogLikelihood => {
                    if let Some(g) = grad_row {
                        for i in 0..v {
                            g[i] += w * probs[i];
                        }
                        g[x] -= w;
                    }
                    -log_probs[x]
                }
                BranchPlan::NegLikelihood => {
                    if let Some(g) = grad_row {
                        for i in 0..v {
                            g[i] -= w * probs[i];
                        }
                        g[x] += w;
                    }
                    log_probs[x]
                }
                BranchPlan::Unlikelihood => {
                    let kept = 1.0 - probs[x];
                    if kept > self.ul_clamp {
                        if let Some(g) = grad_row {
                            let scale = w * probs[x] / kept;
                            for i in 0..v {
                                g[i] -= scale * probs[i];
                            }
                            g[x] += scale;
                        }
                        -kept.ln()
                    } else {
                        // clamped region: constant loss, zero gradient
                        -self.ul_clamp.ln()
                    }
                }
                BranchPlan::Skip => unreachable!(),
            };
            total += w * branch_value;
            if self.penalty_coeff != 0.0 {
                total += self.penalty_coeff * lse * lse;
                if let Some(g) = grads.as_deref_mut().map(|g| &mut g[t]) {
                    let scale = 2.0 * self.penalty_coeff * lse;
                    for i in 0..v {
                        g[i] += scale * probs[i];
                    }
                }
            }
        }
        Ok(total)
    }
}

fn forward_plan(target: &TokenDistribution) -> BranchPlan {
    let entropy_term: f64 =
        target.probs().iter().filter(|&&t| t > 0.0).map(|&t| t * t.ln()).sum();
    BranchPlan::Forward { target: target.probs().to_vec(), entropy_term }
}

fn reverse_plan(target: &TokenDistribution, eps: f64) -> BranchPlan {
    let smoothed = smooth_distribution(target, eps);
    BranchPlan::Reverse {
        log_target: smoothed.probs().iter().map(|&q| q.ln()).collect(),
    }
}

fn targeted_branch(
    orig: &TokenDistribution,
    neg: Option<&NegativeSet>,
    cfg: &ObjectiveConfig,
    forward: bool,
) -> Result<Option<BranchPlan>, ObjectiveError> {
    match target_distribution(orig, neg) {
        Ok(target) => Ok(Some(if forward {
            forward_plan(&target)
        } else {
            reverse_plan(&target, cfg.smoothing_eps)
        })),
        Err(DistributionError::TotalMassRemoved { kept }) => match cfg.mass_removed_policy {
            MassRemovedPolicy::SkipPosition => {
                eprintln!(
                    "warning: projection removed all mass (kept {kept:.3e}); skipping position"
                );
                Ok(None)
            }
            MassRemovedPolicy::Fail => {
                Err(ObjectiveError::Distribution(DistributionError::TotalMassRemoved { kept }))
            }
        },
        Err(e) => Err(ObjectiveError::Distribution(e)),
    }
}

/// Loss of one annotated sequence, differentiable in `model_scores`:
/// `Σ_t [annotated(t) ? α·D_n : D_p] + coeff·lse(s_t)²`.
///
/// `original` must hold the frozen original model's conditionals for the
/// same output.
pub fn sequence_loss(
    model_scores: &[Vec<f64>],
    original: &[TokenDistribution],
    seq: &AnnotatedSequence,
    cfg: &ObjectiveConfig,
) -> Result<f64, ObjectiveError> {
    PreparedSequence::prepare(original, seq, cfg)?.loss(model_scores)
}

/// As [`sequence_loss`], also returning `d loss / d scores` per position.
pub fn sequence_loss_with_grad(
    model_scores: &[Vec<f64>],
    original: &[TokenDistribution],
    seq: &AnnotatedSequence,
    cfg: &ObjectiveConfig,
) -> Result<(f64, Vec<Vec<f64>>), ObjectiveError> {
    PreparedSequence::prepare(original, seq, cfg)?.loss_and_score_grad(model_scores)
}
