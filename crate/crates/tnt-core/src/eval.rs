//! Similarity metrics, unwanted-behavior rates, disfluency counters, and
//! similarity-vs-reduction frontier curves.
//!
//! Similarity is always measured against the ORIGINAL model's generations:
//! the point of a targeted update is to change as little as possible, so
//! "references" here means "what the model used to say". All metrics
//! operate on token ids directly; the pipeline strips the trailing EOS
//! before handing generations to the similarity metrics and keeps it for
//! annotation-based rates.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::Vocab;
use crate::synthdata::{annotate, TaskSpec};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("candidates and references differ in length: {candidates} vs {references}")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("no run qualifies at any threshold")]
    NoQualifyingRun,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-run evaluation row: similarity to the original generations, the
/// unwanted-behavior rate, and disfluency counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    /// Weight on the negative losses; absent for the original model's row.
    pub alpha: Option<f64>,
    pub split: String,
    pub bleu: f64,
    pub rouge_l: f64,
    pub seq_acc: f64,
    pub unwanted_rate: f64,
    pub repeats: u64,
    pub random_qq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SimilarityField {
    Bleu,
    RougeL,
    SeqAcc,
}

impl SimilarityField {
    pub fn of(&self, report: &EvalReport) -> f64 {
        match self {
            SimilarityField::Bleu => report.bleu,
            SimilarityField::RougeL => report.rouge_l,
            SimilarityField::SeqAcc => report.seq_acc,
        }
    }
}

fn check_pairs(
    candidates: &[Vec<TokenId>],
    references: &[Vec<TokenId>],
) -> Result<(), EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(EvalError::LengthMismatch {
            candidates: candidates.len(),
            references: references.len(),
        });
    }
    Ok(())
}

fn ngram_counts(seq: &[TokenId], n: usize) -> HashMap<&[TokenId], u64> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for gram in seq.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 on a scale of 0–100: clipped modified n-gram
/// precision with uniform weights, add-one smoothing on orders 2–4, and the
/// brevity penalty. Single reference per candidate.
pub fn bleu(candidates: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<f64, EvalError> {
    check_pairs(candidates, references)?;
    let mut matches = [0u64; 4];
    let mut totals = [0u64; 4];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (cand, reference) in candidates.iter().zip(references) {
        cand_len += cand.len() as u64;
        ref_len += reference.len() as u64;
        for n in 1..=4 {
            let cand_grams = ngram_counts(cand, n);
            let ref_grams = ngram_counts(reference, n);
            for (gram, &count) in &cand_grams {
                totals[n - 1] += count;
                let clip = ref_grams.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip);
            }
        }
    }
    if cand_len == 0 {
        // every candidate empty: identical to the references only if those
        // are empty too
        return Ok(if ref_len == 0 { 100.0 } else { 0.0 });
    }
    if matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_precision = 0.0;
    for n in 0..4 {
        let (m, t) = if n == 0 {
            (matches[0] as f64, totals[0] as f64)
        } else {
            // add-one smoothing on the higher orders
            (matches[n] as f64 + 1.0, totals[n] as f64 + 1.0)
        };
        log_precision += (m / t).ln();
    }
    let brevity = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * brevity * (log_precision / 4.0).exp())
}

fn lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean per-pair LCS F1 × 100.
pub fn rouge_l(candidates: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<f64, EvalError> {
    check_pairs(candidates, references)?;
    let mut total = 0.0;
    for (cand, reference) in candidates.iter().zip(references) {
        if cand.is_empty() && reference.is_empty() {
            total += 1.0;
            continue;
        }
        let lcs = lcs_len(cand, reference) as f64;
        if lcs == 0.0 {
            continue;
        }
        let p = lcs / cand.len() as f64;
        let r = lcs / reference.len() as f64;
        total += 2.0 * p * r / (p + r);
    }
    Ok(100.0 * total / candidates.len() as f64)
}

/// Percent of exact matches.
pub fn sequence_accuracy(
    candidates: &[Vec<TokenId>],
    references: &[Vec<TokenId>],
) -> Result<f64, EvalError> {
    check_pairs(candidates, references)?;
    let hits = candidates.iter().zip(references).filter(|(c, r)| c == r).count();
    Ok(100.0 * hits as f64 / candidates.len() as f64)
}

/// Percent of generations whose annotation under the task rules is
/// non-empty. Takes (input, generation) pairs because the entity-copy rule
/// needs the input.
pub fn unwanted_rate(
    generations: &[(Vec<TokenId>, Vec<TokenId>)],
    spec: &TaskSpec,
) -> Result<f64, EvalError> {
    if generations.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let flagged = generations
        .iter()
        .filter(|(input, output)| !annotate(input, output, spec).is_empty())
        .count();
    Ok(100.0 * flagged as f64 / generations.len() as f64)
}

/// Number of generations containing a run of one non-reserved token with
/// length ≥ 3. A doubled token is normal text; three in a row is the
/// degenerate-repetition signature.
pub fn count_word_repeats(generations: &[Vec<TokenId>], vocab: &Vocab) -> u64 {
    generations
        .iter()
        .filter(|gen| {
            let mut run = 1usize;
            for w in gen.windows(2) {
                if w[0] == w[1] && !vocab.is_reserved(w[0]) {
                    run += 1;
                    if run >= 3 {
                        return true;
                    }
                } else {
                    run = 1;
                }
            }
            false
        })
        .count() as u64
}

/// Number of generations containing the designated marker token at a
/// non-final position (ignoring the trailing EOS): the marker as the last
/// content token reads as ordinary punctuation, mid-sequence it is a
/// disfluency.
pub fn count_random_qq(generations: &[Vec<TokenId>], qq_id: TokenId, eos: TokenId) -> u64 {
    generations
        .iter()
        .filter(|gen| {
            let content =
                if gen.last() == Some(&eos) { &gen[..gen.len() - 1] } else { &gen[..] };
            content.len() > 1 && content[..content.len() - 1].contains(&qq_id)
        })
        .count() as u64
}

/// For each unwanted-rate threshold (0.1-percentage-point grid from 0 to
/// the original rate), the best similarity achieved by any run with rate
/// strictly below the threshold. `values[i] == None` marks thresholds no
/// run qualifies for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<Option<f64>>,
    pub auc: f64,
}

/// Build a frontier curve. Selection runs on the validation reports (rate
/// and similarity both measured on the validation split); the recorded
/// value is the selected run's TEST similarity. Reports pair up by
/// `(method, alpha)`. AUC is the trapezoid rule over consecutive defined
/// grid points.
pub fn frontier_curve(
    test_reports: &[EvalReport],
    field: SimilarityField,
    validation_reports: &[EvalReport],
    original_rate: f64,
) -> Result<FrontierCurve, EvalError> {
    if test_reports.is_empty() || validation_reports.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let paired: Vec<(&EvalReport, &EvalReport)> = validation_reports
        .iter()
        .filter_map(|v| {
            test_reports
                .iter()
                .find(|t| t.method == v.method && t.alpha == v.alpha)
                .map(|t| (v, t))
        })
        .collect();
    let steps = (original_rate * 10.0 + 1e-9).floor() as usize;
    let thresholds: Vec<f64> = (0..=steps).map(|i| i as f64 / 10.0).collect();
    let values: Vec<Option<f64>> = thresholds
        .iter()
        .map(|&threshold| {
            let mut best: Option<(f64, f64)> = None; // (val similarity, test similarity)
            for (v, t) in &paired {
                if v.unwanted_rate < threshold {
                    let sim = field.of(v);
                    if best.map_or(true, |(s, _)| sim > s) {
                        best = Some((sim, field.of(t)));
                    }
                }
            }
            best.map(|(_, test_sim)| test_sim)
        })
        .collect();
    if values.iter().all(Option::is_none) {
        return Err(EvalError::NoQualifyingRun);
    }
    let mut auc = 0.0;
    for i in 1..values.len() {
        if let (Some(a), Some(b)) = (values[i - 1], values[i]) {
            auc += 0.5 * (a + b) * (thresholds[i] - thresholds[i - 1]);
        }
    }
    Ok(FrontierCurve { thresholds, values, auc })
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    threshold: f64,
    method: String,
    similarity: f64,
}

/// reports.csv: one row per method × α × split.
pub fn write_reports(reports: &[EvalReport], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in reports {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// curves.csv: defined grid points only, one row per (curve, threshold).
pub fn write_curves(curves: &[(String, FrontierCurve)], path: &Path) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path)?;
    for (method, curve) in curves {
        for (i, value) in curve.values.iter().enumerate() {
            if let Some(similarity) = value {
                w.serialize(CurveRow {
                    threshold: curve.thresholds[i],
                    method: method.clone(),
                    similarity: *similarity,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
