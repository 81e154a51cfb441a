//! Self-describing JSON checkpoints.
//!
//! The container records the vocabulary, model kind, hyperparameters, and
//! the flat parameter vector. JSON numbers are written with
//! shortest-roundtrip formatting, so loading a checkpoint reproduces
//! `forward_all` bitwise.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distributions::{TokenDistribution, Vocab};
use crate::TokenId;

use super::{ModelError, ScoreLossFn, SequenceModel, TabularKey, TabularModel, TinyNeuralModel};

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum CheckpointFile {
    Tabular {
        vocab: Vocab,
        window: usize,
        contexts: Vec<TabularKey>,
        parameters: Vec<f64>,
    },
    TinyNeural {
        vocab: Vocab,
        window: usize,
        embed_dim: usize,
        hidden_dim: usize,
        parameters: Vec<f64>,
    },
}

/// Runtime-dispatched model, for code paths (CLI, checkpoints) where the
/// kind is chosen by configuration.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Tabular(TabularModel),
    TinyNeural(TinyNeuralModel),
}

impl AnyModel {
    fn to_file(&self) -> CheckpointFile {
        match self {
            AnyModel::Tabular(m) => CheckpointFile::Tabular {
                vocab: m.vocab().clone(),
                window: m.context_window(),
                contexts: m.contexts().to_vec(),
                parameters: m.parameters().to_vec(),
            },
            AnyModel::TinyNeural(m) => CheckpointFile::TinyNeural {
                vocab: m.vocab().clone(),
                window: m.context_window(),
                embed_dim: m.embed_dim(),
                hidden_dim: m.hidden_dim(),
                parameters: m.parameters().to_vec(),
            },
        }
    }

    fn from_file(file: CheckpointFile) -> Self {
        match file {
            CheckpointFile::Tabular { vocab, window, contexts, parameters } => {
                AnyModel::Tabular(TabularModel::from_parts(vocab, window, contexts, parameters))
            }
            CheckpointFile::TinyNeural { vocab, window, embed_dim, hidden_dim, parameters } => {
                AnyModel::TinyNeural(TinyNeuralModel::from_parts(
                    vocab, embed_dim, hidden_dim, window, parameters,
                ))
            }
        }
    }
}

macro_rules! delegate {
    ($self:expr, $m:ident => $body:expr) => {
        match $self {
            AnyModel::Tabular($m) => $body,
            AnyModel::TinyNeural($m) => $body,
        }
    };
}

impl SequenceModel for AnyModel {
    fn vocab(&self) -> &Vocab {
        delegate!(self, m => m.vocab())
    }

    fn context_window(&self) -> usize {
        delegate!(self, m => m.context_window())
    }

    fn parameters(&self) -> &[f64] {
        delegate!(self, m => m.parameters())
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        delegate!(self, m => m.parameters_mut())
    }

    fn next_scores(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        delegate!(self, m => m.next_scores(input, prefix))
    }

    fn forward_scores(
        &self,
        input: &[TokenId],
        output: &[TokenId],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        delegate!(self, m => m.forward_scores(input, output))
    }

    fn backward(
        &self,
        input: &[TokenId],
        output: &[TokenId],
        dscores: &[Vec<f64>],
        grad: &mut [f64],
    ) {
        delegate!(self, m => m.backward(input, output, dscores, grad))
    }

    fn register_context(&mut self, input: &[TokenId], output: &[TokenId]) {
        delegate!(self, m => m.register_context(input, output))
    }

    fn loss_and_gradient(
        &self,
        input: &[TokenId],
        output: &[TokenId],
        loss: ScoreLossFn<'_>,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        delegate!(self, m => m.loss_and_gradient(input, output, loss, grad))
    }
}

pub fn save_checkpoint(model: &AnyModel, path: &Path) -> Result<(), ModelError> {
    let file = model.to_file();
    let json = serde_json::to_string(&file)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel, ModelError> {
    let json = fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&json)?;
    Ok(AnyModel::from_file(file))
}

/// Bit-level fingerprint of a parameter vector; used to assert the frozen
/// original is untouched by training.
pub fn parameter_fingerprint(params: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &p in params {
        for b in p.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

#[allow(dead_code)]
fn _assert_distribution_type_is_used(_: TokenDistribution) {}
