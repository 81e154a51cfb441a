//! Context-table model: one score row per observed context.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::distributions::{TokenDistribution, Vocab};
use crate::TokenId;

use super::{context_tokens, SequenceModel};

/// Score written for entries that must be exact zeros after softmax:
/// `exp(-1e4 − lse)` underflows to 0.0 in 64-bit arithmetic.
pub const ZERO_CONDITIONAL_SCORE: f64 = -1e4;

/// A tabular context: order-free hash of the input sequence plus the
/// trailing `k` output tokens (BOS-padded, oldest first).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TabularKey {
    pub input_hash: u64,
    pub window: Vec<TokenId>,
}

/// FNV-1a over the little-endian token bytes; stable across platforms and
/// releases, unlike the std hasher.
pub(crate) fn input_summary_hash(input: &[TokenId]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &id in input {
        for b in id.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Map from context to a score vector of length V. Unseen contexts score
/// zero everywhere (uniform conditional) and carry no parameters. Keys are
/// enumerable in insertion order, which is also the parameter layout: row
/// `i` occupies `params[i*V .. (i+1)*V]`.
#[derive(Debug, Clone)]
pub struct TabularModel {
    vocab: Vocab,
    window: usize,
    keys: Vec<TabularKey>,
    index: HashMap<TabularKey, usize>,
    params: Vec<f64>,
}

impl TabularModel {
    pub fn new(vocab: Vocab, window: usize) -> Self {
        assert!(window >= 1, "context window must be at least 1");
        Self { vocab, window, keys: Vec::new(), index: HashMap::new(), params: Vec::new() }
    }

    pub fn key_for(&self, input: &[TokenId], prefix: &[TokenId]) -> TabularKey {
        TabularKey {
            input_hash: input_summary_hash(input),
            window: context_tokens(prefix, self.window, self.vocab.bos()),
        }
    }

    /// Row index for a context, materializing a zero row if absent.
    pub fn ensure_row(&mut self, key: TabularKey) -> usize {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        let i = self.keys.len();
        self.keys.push(key.clone());
        self.index.insert(key, i);
        self.params.extend(std::iter::repeat(0.0).take(self.vocab.size()));
        i
    }

    pub fn row_of(&self, key: &TabularKey) -> Option<&[f64]> {
        let v = self.vocab.size();
        self.index.get(key).map(|&i| &self.params[i * v..(i + 1) * v])
    }

    /// Overwrite the score row for the context reached by `(input, prefix)`.
    pub fn set_scores(&mut self, input: &[TokenId], prefix: &[TokenId], scores: &[f64]) {
        assert_eq!(scores.len(), self.vocab.size());
        let key = self.key_for(input, prefix);
        let i = self.ensure_row(key);
        let v = self.vocab.size();
        self.params[i * v..(i + 1) * v].copy_from_slice(scores);
    }

    /// Realize an exact conditional: scores are `ln p` for positive entries
    /// and [`ZERO_CONDITIONAL_SCORE`] for zeros, so softmax reproduces the
    /// distribution within 1e-9 and zeros come back as exact zeros.
    pub fn set_next_distribution(
        &mut self,
        input: &[TokenId],
        prefix: &[TokenId],
        dist: &TokenDistribution,
    ) {
        assert_eq!(dist.len(), self.vocab.size());
        let scores: Vec<f64> = dist
            .probs()
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { ZERO_CONDITIONAL_SCORE })
            .collect();
        self.set_scores(input, prefix, &scores);
    }

    pub fn contexts(&self) -> &[TabularKey] {
        &self.keys
    }

    pub(crate) fn from_parts(
        vocab: Vocab,
        window: usize,
        keys: Vec<TabularKey>,
        params: Vec<f64>,
    ) -> Self {
        assert_eq!(params.len(), keys.len() * vocab.size());
        let index = keys.iter().cloned().enumerate().map(|(i, k)| (k, i)).collect();
        Self { vocab, window, keys, index, params }
    }
}

impl SequenceModel for TabularModel {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn context_window(&self) -> usize {
        self.window
    }

    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn next_scores(&self, input: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        let key = self.key_for(input, prefix);
        match self.row_of(&key) {
            Some(row) => row.to_vec(),
            None => vec![0.0; self.vocab.size()],
        }
    }

    fn backward(
        &self,
        input: &[TokenId],
        output: &[TokenId],
        dscores: &[Vec<f64>],
        grad: &mut [f64],
    ) {
        debug_assert_eq!(dscores.len(), output.len());
        let v = self.vocab.size();
        for (t, ds) in dscores.iter().enumerate() {
            let key = self.key_for(input, &output[..t]);
            // contexts without a row have no parameters to update
            if let Some(&i) = self.index.get(&key) {
                let row = &mut grad[i * v..(i + 1) * v];
                for (g, &d) in row.iter_mut().zip(ds) {
                    *g += d;
                }
            }
        }
    }

    fn register_context(&mut self, input: &[TokenId], output: &[TokenId]) {
        for t in 0..output.len() {
            let key = self.key_for(input, &output[..t]);
            self.ensure_row(key);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_all;

    fn vocab() -> Vocab {
        Vocab::new(6, 1, 2, 0).unwrap()
    }

    #[test]
    fn realizes_arbitrary_conditionals_with_exact_zeros() {
        let mut model = TabularModel::new(vocab(), 2);
        let dist = TokenDistribution::new(vec![0.0, 0.125, 0.5, 0.25, 0.125, 0.0]).unwrap();
        model.set_next_distribution(&[3], &[4], &dist);
        let got = forward_all(&model, &[3], &[4, 5]).unwrap().remove(1);
        for i in 0..6 {
            if dist[i] == 0.0 {
                assert_eq!(got[i], 0.0, "zero entries must be exact");
            } else {
                assert!((got[i] - dist[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn input_hash_distinguishes_inputs_not_order_sensitive_cases() {
        // the hash is order-sensitive by construction; equal sequences agree
        assert_eq!(input_summary_hash(&[1, 2, 3]), input_summary_hash(&[1, 2, 3]));
        assert_ne!(input_summary_hash(&[1, 2, 3]), input_summary_hash(&[3, 2, 1]));
        assert_ne!(input_summary_hash(&[]), input_summary_hash(&[0]));
    }

    #[test]
    fn register_context_materializes_each_prefix_once() {
        let mut model = TabularModel::new(vocab(), 2);
        model.register_context(&[3], &[4, 5, 4]);
        assert_eq!(model.contexts().len(), 3);
        model.register_context(&[3], &[4, 5, 4]);
        assert_eq!(model.contexts().len(), 3);
        assert_eq!(model.parameters().len(), 3 * 6);
    }
}
