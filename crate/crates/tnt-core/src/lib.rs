//! Targeted negative training for autoregressive sequence models.
//!
//! The library finetunes a sequence model so that annotated negative tokens
//! receive zero probability while the updated model stays minimally distant
//! (in KL divergence) from the original. The target of the update at every
//! token conditional is the information projection of the original
//! conditional onto the set of distributions supported off the negative
//! tokens: zero the negatives, renormalize, leave the kept ratios untouched.
//!
//! Layout:
//! - [`distributions`] — simplex-level math: projection, smoothing,
//!   divergences, and the token-level baseline losses.
//! - [`model`] — desk-scale autoregressive models (tabular and tiny neural)
//!   with exact analytic gradients, greedy decoding, and checkpoints.
//! - [`objective`] — per-sequence losses for the targeted-update variants
//!   and the negative-likelihood / unlikelihood baselines.
//! - [`trainer`] — the finetuning loop with a frozen original model,
//!   periodic validation, and best-checkpoint selection.
//! - [`synthdata`] — synthetic corpora with rule-based token annotations.
//! - [`eval`] — similarity metrics, unwanted-behavior rates, disfluency
//!   counters, and similarity-vs-reduction frontier curves.
//! - [`oracles`] — independent brute-force verifiers (grid search on the
//!   simplex, exhaustive sequence enumeration, the KL-regularized-reward
//!   identity).
//! - [`experiment`] — the end-to-end pipeline behind the `tnt` CLI.

pub mod distributions;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod objective;
pub mod oracles;
pub mod synthdata;
pub mod trainer;

pub use distributions::{NegativeSet, TokenDistribution, Vocab};
pub use model::{SequenceModel, TabularModel, TinyNeuralModel};
pub use objective::{AnnotatedSequence, Method, ObjectiveConfig, TokenAnnotation};

/// Token identifier; always interpreted relative to a [`Vocab`].
pub type TokenId = u32;
