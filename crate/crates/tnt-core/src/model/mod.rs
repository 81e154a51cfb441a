//! Desk-scale autoregressive sequence models.
//!
//! A [`SequenceModel`] exposes the next-token score vector for any
//! `(input, output prefix)` pair; softmax of the scores is the token
//! conditional. Two implementations:
//!
//! - [`TabularModel`] — one score row per observed context, exact and
//!   enumerable; unseen contexts are uniform. Used wherever the analytic
//!   optimum must be reachable exactly.
//! - [`TinyNeuralModel`] — bag-of-input embedding + windowed output
//!   embeddings through one tanh layer. The desk-scale stand-in for a real
//!   sequence-to-sequence model: parameters are shared across contexts, so
//!   losses interact the way they do at scale.
//!
//! Both are deterministic: identical inputs and parameters give bitwise
//! identical outputs. The input sequence is summarized order-free (a hash id
//! for the tabular model, an embedding sum for the neural one); the output
//! is conditioned through the trailing `k` tokens.

mod checkpoint;
mod neural;
mod tabular;

pub use checkpoint::{load_checkpoint, parameter_fingerprint, save_checkpoint, AnyModel};
pub use neural::TinyNeuralModel;
pub use tabular::{TabularKey, TabularModel, ZERO_CONDITIONAL_SCORE};

use thiserror::Error;

use crate::distributions::{TokenDistribution, Vocab};
use crate::objective::ObjectiveError;
use crate::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("non-finite loss or gradient: {0}")]
    NonFiniteLoss(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(#[from] serde_json::Error),
}

/// Gradient of a scalar loss with respect to a model's flat parameter
/// vector; same length, finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterGradient {
    values: Vec<f64>,
}

impl ParameterGradient {
    pub fn zeros(len: usize) -> Self {
        Self { values: vec![0.0; len] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Scalar loss of a teacher-forced pass, differentiable in the per-position
/// score vectors: returns the loss value and `d loss / d scores` for every
/// position.
pub type ScoreLossFn<'a> =
    &'a mut dyn FnMut(&[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>), ObjectiveError>;

/// An autoregressive model over a fixed vocabulary.
pub trait SequenceModel {
    fn vocab(&self) -> &Vocab;

    /// Number of trailing output tokens conditioning the next token.
    fn context_window(&self) -> usize;

    fn parameters(&self) -> &[f64];

    fn parameters_mut(&mut self) -> &mut [f64];

    /// Raw scores for the next token after `prefix`. softmax(scores) is the
    /// token conditional.
    fn next_scores(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64>;

    /// Scores for every position of a teacher-forced pass: entry `t` scores
    /// the token at position `t` given `output[..t]`.
    fn forward_scores(
        &self,
        input: &[TokenId],
        output: &[TokenId],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        check_ids(self.vocab(), input)?;
        check_ids(self.vocab(), output)?;
        Ok((0..output.len()).map(|t| self.next_scores(input, &output[..t])).collect())
    }

    /// Accumulate `d loss / d parameters` into `grad`, given
    /// `d loss / d scores` for every position of a teacher-forced pass.
    fn backward(
        &self,
        input: &[TokenId],
        output: &[TokenId],
        dscores: &[Vec<f64>],
        grad: &mut [f64],
    );

    /// Materialize whatever per-context state a teacher-forced pass over
    /// this example will need gradients for. No-op for models whose
    /// parameters do not grow with the data.
    fn register_context(&mut self, _input: &[TokenId], _output: &[TokenId]) {}

    /// One fused teacher-forced pass: forward scores, loss, backward.
    /// Implementations may cache forward intermediates.
    fn loss_and_gradient(
        &self,
        input: &[TokenId],
        output: &[TokenId],
        loss: ScoreLossFn<'_>,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        let scores = self.forward_scores(input, output)?;
        let (value, dscores) = loss(&scores)?;
        self.backward(input, output, &dscores, grad);
        Ok(value)
    }
}

pub(crate) fn check_ids(vocab: &Vocab, ids: &[TokenId]) -> Result<(), ModelError> {
    for &id in ids {
        if !vocab.contains(id) {
            return Err(ModelError::TokenOutOfRange { id, vocab_size: vocab.size() });
        }
    }
    Ok(())
}

/// The trailing `k` output tokens before position `t`, oldest first,
/// BOS-padded on the left.
pub(crate) fn context_tokens(prefix: &[TokenId], k: usize, bos: TokenId) -> Vec<TokenId> {
    let t = prefix.len();
    (0..k)
        .map(|s| {
            let j = t as isize - k as isize + s as isize;
            if j < 0 {
                bos
            } else {
                prefix[j as usize]
            }
        })
        .collect()
}

/// Token conditionals for every prefix of `output` in one teacher-forced
/// pass: entry `t` is the distribution of the token at position `t` given
/// `input` and `output[..t]`.
pub fn forward_all<M: SequenceModel + ?Sized>(
    model: &M,
    input: &[TokenId],
    output: &[TokenId],
) -> Result<Vec<TokenDistribution>, ModelError> {
    let scores = model.forward_scores(input, output)?;
    Ok(scores.iter().map(|s| TokenDistribution::from_scores(s)).collect())
}

/// Greedy decoding: append the argmax token until EOS or `max_len`. Ties
/// break toward the lowest token id, so decoding is deterministic across
/// platforms.
pub fn greedy_decode<M: SequenceModel + ?Sized>(
    model: &M,
    input: &[TokenId],
    max_len: usize,
) -> Vec<TokenId> {
    assert!(max_len >= 1);
    let eos = model.vocab().eos();
    let mut out: Vec<TokenId> = Vec::with_capacity(max_len);
    while out.len() < max_len {
        let scores = model.next_scores(input, &out);
        let mut best = 0usize;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        out.push(best as TokenId);
        if best as TokenId == eos {
            break;
        }
    }
    out
}

/// Loss value and exact analytic parameter gradient of a score-level loss
/// over one teacher-forced pass. Fails with [`ModelError::NonFiniteLoss`]
/// if the loss or any gradient entry is NaN or infinite.
pub fn gradients<M: SequenceModel + ?Sized>(
    model: &M,
    input: &[TokenId],
    output: &[TokenId],
    loss: ScoreLossFn<'_>,
) -> Result<(f64, ParameterGradient), ModelError> {
    let mut grad = ParameterGradient::zeros(model.parameters().len());
    let value = model.loss_and_gradient(input, output, loss, grad.values_mut())?;
    if !value.is_finite() {
        return Err(ModelError::NonFiniteLoss(format!("loss = {value}")));
    }
    if !grad.is_finite() {
        return Err(ModelError::NonFiniteLoss("gradient has a non-finite entry".into()));
    }
    Ok((value, grad))
}
