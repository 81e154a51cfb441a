//! Python bindings for the core types and operations.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use tnt_core::distributions as dist;
use tnt_core::distributions::{NegativeSet, TokenDistribution, Vocab};
use tnt_core::model::{self, AnyModel, SequenceModel, TinyNeuralModel};
use tnt_core::objective::{AnnotatedSequence, Method, ObjectiveConfig, TokenAnnotation};
use tnt_core::oracles;
use tnt_core::trainer::{self, TrainConfig};
use tnt_core::TokenId;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_distribution(probs: Vec<f64>) -> PyResult<TokenDistribution> {
    TokenDistribution::new(probs).map_err(value_err)
}

/// Zero the negative ids and renormalize the rest.
#[pyfunction]
fn project_out_negatives(probs: Vec<f64>, negative_ids: Vec<TokenId>) -> PyResult<Vec<f64>> {
    let p = to_distribution(probs)?;
    dist::project_out_negatives(&p, &NegativeSet::new(negative_ids))
        .map(TokenDistribution::into_probs)
        .map_err(value_err)
}

/// `(p_i + eps) / (1 + V·eps)`.
#[pyfunction]
fn smooth_distribution(probs: Vec<f64>, eps: f64) -> PyResult<Vec<f64>> {
    if eps <= 0.0 {
        return Err(PyValueError::new_err("eps must be positive"));
    }
    Ok(dist::smooth_distribution(&to_distribution(probs)?, eps).into_probs())
}

/// `KL(target ‖ model)`, model given as log-probabilities.
#[pyfunction]
fn forward_kl(target: Vec<f64>, model_log_probs: Vec<f64>) -> PyResult<f64> {
    let t = to_distribution(target)?;
    if t.len() != model_log_probs.len() {
        return Err(PyValueError::new_err("length mismatch"));
    }
    Ok(dist::forward_kl(&t, &model_log_probs))
}

/// `KL(model ‖ target)` for a strictly positive target.
#[pyfunction]
fn reverse_kl(target: Vec<f64>, model_probs: Vec<f64>) -> PyResult<f64> {
    dist::reverse_kl(&to_distribution(target)?, &to_distribution(model_probs)?).map_err(value_err)
}

#[pyfunction]
fn nl_token_loss(log_prob_of_negative_token: f64) -> f64 {
    dist::nl_token_loss(log_prob_of_negative_token)
}

#[pyfunction]
fn ul_token_loss(prob_of_negative_token: f64, clamp: f64) -> f64 {
    dist::ul_token_loss(prob_of_negative_token, clamp)
}

#[pyfunction]
fn ll_token_loss(log_prob_of_realized_token: f64) -> f64 {
    dist::ll_token_loss(log_prob_of_realized_token)
}

/// Grid-search minimizer of `KL(q ‖ p)` with the negative ids zeroed.
#[pyfunction]
fn brute_force_projection(
    probs: Vec<f64>,
    negative_ids: Vec<TokenId>,
    grid: u32,
) -> PyResult<Vec<f64>> {
    let p = to_distribution(probs)?;
    oracles::brute_force_projection(&p, &NegativeSet::new(negative_ids), grid)
        .map(TokenDistribution::into_probs)
        .map_err(value_err)
}

#[pyfunction]
fn bleu(candidates: Vec<Vec<TokenId>>, references: Vec<Vec<TokenId>>) -> PyResult<f64> {
    tnt_core::eval::bleu(&candidates, &references).map_err(value_err)
}

#[pyfunction]
fn rouge_l(candidates: Vec<Vec<TokenId>>, references: Vec<Vec<TokenId>>) -> PyResult<f64> {
    tnt_core::eval::rouge_l(&candidates, &references).map_err(value_err)
}

#[pyfunction]
fn sequence_accuracy(candidates: Vec<Vec<TokenId>>, references: Vec<Vec<TokenId>>) -> PyResult<f64> {
    tnt_core::eval::sequence_accuracy(&candidates, &references).map_err(value_err)
}

/// The oracle and invariant suite; returns (name, measured, tolerance,
/// passed) rows.
#[pyfunction]
fn run_verification(seed: u64) -> Vec<(String, f64, f64, bool)> {
    oracles::run_verification(seed)
        .into_iter()
        .map(|c| (c.name, c.measured, c.tolerance, c.passed))
        .collect()
}

/// A tiny autoregressive sequence model with trainable parameters.
#[pyclass(name = "TinyNeuralModel")]
struct PyTinyNeuralModel {
    inner: AnyModel,
}

#[pymethods]
impl PyTinyNeuralModel {
    #[new]
    #[pyo3(signature = (vocab_size, bos, eos, pad, embed_dim=8, hidden_dim=16, window=2, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab_size: usize,
        bos: TokenId,
        eos: TokenId,
        pad: TokenId,
        embed_dim: usize,
        hidden_dim: usize,
        window: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let vocab = Vocab::new(vocab_size, bos, eos, pad).map_err(value_err)?;
        Ok(Self {
            inner: AnyModel::TinyNeural(TinyNeuralModel::new(
                vocab, embed_dim, hidden_dim, window, seed,
            )),
        })
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameters().len()
    }

    /// Token conditionals for every prefix of `output`.
    fn forward_all(&self, input: Vec<TokenId>, output: Vec<TokenId>) -> PyResult<Vec<Vec<f64>>> {
        model::forward_all(&self.inner, &input, &output)
            .map(|dists| dists.into_iter().map(TokenDistribution::into_probs).collect())
            .map_err(value_err)
    }

    /// Greedy decoding: argmax until EOS or `max_len`, lowest id on ties.
    fn greedy_decode(&self, input: Vec<TokenId>, max_len: usize) -> Vec<TokenId> {
        model::greedy_decode(&self.inner, &input, max_len)
    }

    fn save(&self, path: String) -> PyResult<()> {
        model::save_checkpoint(&self.inner, std::path::Path::new(&path)).map_err(value_err)
    }

    #[staticmethod]
    fn load(path: String) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_checkpoint(std::path::Path::new(&path)).map_err(value_err)?,
        })
    }

    /// Finetune against an objective and return the best-validation model.
    ///
    /// Sequences are `(input, output, negatives)` triples where `negatives`
    /// is a list of `(position, [token ids])` pairs. Methods: "tn-ff",
    /// "tn-rr", "tn-rf", "tn-f+ll", "tn-r+ll", "nl+ll", "ul+ll", "ll".
    #[pyo3(signature = (train_set, val_set, method, alpha=1.0, steps=500, learning_rate=1e-3, batch_size=32, eval_every=100, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn finetune(
        &self,
        train_set: Vec<(Vec<TokenId>, Vec<TokenId>, Vec<(usize, Vec<TokenId>)>)>,
        val_set: Vec<(Vec<TokenId>, Vec<TokenId>, Vec<(usize, Vec<TokenId>)>)>,
        method: String,
        alpha: f64,
        steps: usize,
        learning_rate: f64,
        batch_size: usize,
        eval_every: usize,
        seed: u64,
    ) -> PyResult<(Self, f64)> {
        let method = Method::parse(&method)
            .ok_or_else(|| PyValueError::new_err(format!("unknown method {method}")))?;
        let convert = |rows: Vec<(Vec<TokenId>, Vec<TokenId>, Vec<(usize, Vec<TokenId>)>)>| {
            rows.into_iter()
                .map(|(input, output, negs)| {
                    let annotations = negs
                        .into_iter()
                        .map(|(position, ids)| TokenAnnotation {
                            position,
                            negative_ids: NegativeSet::new(ids),
                        })
                        .collect();
                    AnnotatedSequence::new(input, output, annotations).map_err(value_err)
                })
                .collect::<PyResult<Vec<_>>>()
        };
        let train_set = convert(train_set)?;
        let val_set = convert(val_set)?;
        let mut cfg = TrainConfig::new(ObjectiveConfig::new(method).with_alpha(alpha));
        cfg.steps = steps;
        cfg.learning_rate = learning_rate;
        cfg.batch_size = batch_size;
        cfg.eval_every = eval_every.min(steps.max(1));
        cfg.seed = seed;
        let result = trainer::train(&self.inner, &train_set, &val_set, &cfg).map_err(value_err)?;
        Ok((Self { inner: result.model }, result.best_val_loss))
    }
}

#[pymodule]
fn tnt_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(project_out_negatives, m)?)?;
    m.add_function(wrap_pyfunction!(smooth_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(forward_kl, m)?)?;
    m.add_function(wrap_pyfunction!(reverse_kl, m)?)?;
    m.add_function(wrap_pyfunction!(nl_token_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ul_token_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ll_token_loss, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_projection, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(sequence_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(run_verification, m)?)?;
    m.add_class::<PyTinyNeuralModel>()?;
    Ok(())
}
