//! Tiny neural sequence model: bag-of-input embedding plus a window of
//! output-token embeddings, one tanh hidden layer, linear output scores.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::distributions::Vocab;
use crate::TokenId;

use super::{check_ids, context_tokens, ModelError, ScoreLossFn, SequenceModel};

/// `scores(t) = W2 · tanh(W1 · [u; e(x_{t-k}); …; e(x_{t-1})] + b1) + b2`
/// where `u` is the sum of input-token embeddings and `e` the output-token
/// embedding table (BOS rows pad short prefixes). All parameters live in
/// one flat vector; tanh keeps every coordinate smooth for the
/// finite-difference checks.
#[derive(Debug, Clone)]
pub struct TinyNeuralModel {
    vocab: Vocab,
    embed_dim: usize,
    hidden_dim: usize,
    window: usize,
    params: Vec<f64>,
}

struct Layout {
    in_embed: usize,
    tok_embed: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl TinyNeuralModel {
    pub fn new(vocab: Vocab, embed_dim: usize, hidden_dim: usize, window: usize, seed: u64) -> Self {
        assert!(window >= 1 && embed_dim >= 1 && hidden_dim >= 1);
        let mut model = Self { vocab, embed_dim, hidden_dim, window, params: Vec::new() };
        let layout = model.layout();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut params = vec![0.0; layout.total];
        let v = model.vocab.size();
        let concat = model.concat_dim();
        let embed_scale = 0.3;
        for p in &mut params[layout.in_embed..layout.w1] {
            *p = rng.gen_range(-embed_scale..embed_scale);
        }
        let w1_scale = (6.0 / (concat + hidden_dim) as f64).sqrt();
        for p in &mut params[layout.w1..layout.b1] {
            *p = rng.gen_range(-w1_scale..w1_scale);
        }
        let w2_scale = (6.0 / (hidden_dim + v) as f64).sqrt();
        for p in &mut params[layout.w2..layout.b2] {
            *p = rng.gen_range(-w2_scale..w2_scale);
        }
        model.params = params;
        model
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    fn concat_dim(&self) -> usize {
        (self.window + 1) * self.embed_dim
    }

    fn layout(&self) -> Layout {
        let v = self.vocab.size();
        let d = self.embed_dim;
        let h = self.hidden_dim;
        let concat = self.concat_dim();
        let in_embed = 0;
        let tok_embed = in_embed + v * d;
        let w1 = tok_embed + v * d;
        let b1 = w1 + h * concat;
        let w2 = b1 + h;
        let b2 = w2 + v * h;
        let total = b2 + v;
        Layout { in_embed, tok_embed, w1, b1, w2, b2, total }
    }

    pub(crate) fn from_parts(
        vocab: Vocab,
        embed_dim: usize,
        hidden_dim: usize,
        window: usize,
        params: Vec<f64>,
    ) -> Self {
        let model = Self { vocab, embed_dim, hidden_dim, window, params: Vec::new() };
        assert_eq!(params.len(), model.layout().total);
        Self { params, ..model }
    }

    /// Sum of input-token embeddings.
    fn input_summary(&self, input: &[TokenId]) -> Vec<f64> {
        let layout = self.layout();
        let d = self.embed_dim;
        let mut u = vec![0.0; d];
        for &tok in input {
            let row = layout.in_embed + tok as usize * d;
            for (ui, &e) in u.iter_mut().zip(&self.params[row..row + d]) {
                *ui += e;
            }
        }
        u
    }

    /// Forward one position given the precomputed input summary; fills
    /// `concat` and `hidden`, returns the score vector.
    fn position_forward(
        &self,
        u: &[f64],
        input_len_window: &[TokenId],
        concat: &mut [f64],
        hidden: &mut [f64],
    ) -> Vec<f64> {
        let layout = self.layout();
        let d = self.embed_dim;
        let h = self.hidden_dim;
        let v = self.vocab.size();
        concat[..d].copy_from_slice(u);
        for (s, &tok) in input_len_window.iter().enumerate() {
            let row = layout.tok_embed + tok as usize * d;
            concat[(s + 1) * d..(s + 2) * d].copy_from_slice(&self.params[row..row + d]);
        }
        let cdim = concat.len();
        for (j, hj) in hidden.iter_mut().enumerate() {
            let row = layout.w1 + j * cdim;
            let mut z = self.params[layout.b1 + j];
            for (c, &w) in concat.iter().zip(&self.params[row..row + cdim]) {
                z += c * w;
            }
            *hj = z.tanh();
        }
        let mut scores = vec![0.0; v];
        for (i, si) in scores.iter_mut().enumerate() {
            let row = layout.w2 + i * h;
            let mut s = self.params[layout.b2 + i];
            for (hj, &w) in hidden.iter().zip(&self.params[row..row + h]) {
                s += hj * w;
            }
            *si = s;
        }
        scores
    }

    /// Backward one position; accumulates into `grad` and `du` (the
    /// gradient of the shared input summary, scattered once per sequence).
    fn position_backward(
        &self,
        window_tokens: &[TokenId],
        concat: &[f64],
        hidden: &[f64],
        dscores: &[f64],
        grad: &mut [f64],
        du: &mut [f64],
    ) {
        let layout = self.layout();
        let d = self.embed_dim;
        let h = self.hidden_dim;
        let cdim = concat.len();
        // output layer
        let mut dhidden = vec![0.0; h];
        for (i, &ds) in dscores.iter().enumerate() {
            if ds == 0.0 {
                continue;
            }
            grad[layout.b2 + i] += ds;
            let row = layout.w2 + i * h;
            for j in 0..h {
                grad[row + j] += ds * hidden[j];
                dhidden[j] += ds * self.params[row + j];
            }
        }
        // tanh
        let mut dz = vec![0.0; h];
        for j in 0..h {
            dz[j] = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
        }
        // hidden layer
        let mut dconcat = vec![0.0; cdim];
        for (j, &dzj) in dz.iter().enumerate() {
            if dzj == 0.0 {
                continue;
            }
            grad[layout.b1 + j] += dzj;
            let row = layout.w1 + j * cdim;
            for c in 0..cdim {
                grad[row + c] += dzj * concat[c];
                dconcat[c] += dzj * self.params[row + c];
            }
        }
        // embeddings
        for (x, &dc) in du.iter_mut().zip(&dconcat[..d]) {
            *x += dc;
        }
        for (s, &tok) in window_tokens.iter().enumerate() {
            let row = layout.tok_embed + tok as usize * d;
            let slice = &dconcat[(s + 1) * d..(s + 2) * d];
            for (g, &dc) in grad[row..row + d].iter_mut().zip(slice) {
                *g += dc;
            }
        }
    }
}

impl SequenceModel for TinyNeuralModel {
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
        let u = self.input_summary(input);
        let window = context_tokens(prefix, self.window, self.vocab.bos());
        let mut concat = vec![0.0; self.concat_dim()];
        let mut hidden = vec![0.0; self.hidden_dim];
        self.position_forward(&u, &window, &mut concat, &mut hidden)
    }

    fn forward_scores(
        &self,
        input: &[TokenId],
        output: &[TokenId],
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        check_ids(&self.vocab, input)?;
        check_ids(&self.vocab, output)?;
        let u = self.input_summary(input);
        let mut concat = vec![0.0; self.concat_dim()];
        let mut hidden = vec![0.0; self.hidden_dim];
        let mut all = Vec::with_capacity(output.len());
        for t in 0..output.len() {
            let window = context_tokens(&output[..t], self.window, self.vocab.bos());
            all.push(self.position_forward(&u, &window, &mut concat, &mut hidden));
        }
        Ok(all)
    }

    fn backward(
        &self,
        input: &[TokenId],
        output: &[TokenId],
        dscores: &[Vec<f64>],
        grad: &mut [f64],
    ) {
        debug_assert_eq!(dscores.len(), output.len());
        let u = self.input_summary(input);
        let mut concat = vec![0.0; self.concat_dim()];
        let mut hidden = vec![0.0; self.hidden_dim];
        let mut du = vec![0.0; self.embed_dim];
        for (t, ds) in dscores.iter().enumerate() {
            let window = context_tokens(&output[..t], self.window, self.vocab.bos());
            self.position_forward(&u, &window, &mut concat, &mut hidden);
            self.position_backward(&window, &concat, &hidden, ds, grad, &mut du);
        }
        scatter_input_gradient(self, input, &du, grad);
    }

    fn loss_and_gradient(
        &self,
        input: &[TokenId],
        output: &[TokenId],
        loss: ScoreLossFn<'_>,
        grad: &mut [f64],
    ) -> Result<f64, ModelError> {
        check_ids(&self.vocab, input)?;
        check_ids(&self.vocab, output)?;
        let u = self.input_summary(input);
        let cdim = self.concat_dim();
        let h = self.hidden_dim;
        let mut scores = Vec::with_capacity(output.len());
        let mut traces: Vec<(Vec<TokenId>, Vec<f64>, Vec<f64>)> = Vec::with_capacity(output.len());
        for t in 0..output.len() {
            let window = context_tokens(&output[..t], self.window, self.vocab.bos());
            let mut concat = vec![0.0; cdim];
            let mut hidden = vec![0.0; h];
            scores.push(self.position_forward(&u, &window, &mut concat, &mut hidden));
            traces.push((window, concat, hidden));
        }
        let (value, dscores) = loss(&scores)?;
        let mut du = vec![0.0; self.embed_dim];
        for ((window, concat, hidden), ds) in traces.iter().zip(&dscores) {
            self.position_backward(window, concat, hidden, ds, grad, &mut du);
        }
        scatter_input_gradient(self, input, &du, grad);
        Ok(value)
    }
}

fn scatter_input_gradient(model: &TinyNeuralModel, input: &[TokenId], du: &[f64], grad: &mut [f64]) {
    let layout = model.layout();
    let d = model.embed_dim;
    for &tok in input {
        let row = layout.in_embed + tok as usize * d;
        for (g, &x) in grad[row..row + d].iter_mut().zip(du) {
            *g += x;
        }
    }
}
