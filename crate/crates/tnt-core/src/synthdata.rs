//! Synthetic corpora with rule-based token annotations.
//!
//! Two task families mirror the update scenarios the method is aimed at:
//!
//! - **entity-copy**: the input carries a few entity tokens among fillers;
//!   the correct output lists exactly the input's entities. A designated
//!   trigger filler makes the gold output mention one entity that is absent
//!   from the input — the hallucination analog. Any output entity absent
//!   from the input is annotated negative.
//! - **lexicon**: the input carries topic tokens; the output is built from
//!   their fixed response tokens. Some topics respond with a token from the
//!   forbidden lexicon — the toxicity analog: the base corpus legitimately
//!   teaches the offending words, so a trained model emits them with high
//!   confidence and un-learning them competes with everything sharing those
//!   contexts. Any output token from the forbidden set is annotated
//!   negative, regardless of the input.
//!
//! Corruption is a deterministic function of observable input features
//! (trigger fillers, forbidden topics), so a trained model reproduces it
//! under greedy decoding and the update step has real negatives to remove.
//! Outputs continue after a forbidden token (closer token, EOS), so losses
//! exercise the positions that follow a negative.
//!
//! Generation is deterministic in the seed: every example draws from its
//! own sub-seeded generator, and the three splits use disjoint salts.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{NegativeSet, Vocab};
use crate::model::{greedy_decode, SequenceModel};
use crate::objective::{AnnotatedSequence, ObjectiveError, TokenAnnotation};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Sequence(#[from] ObjectiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    EntityCopy,
    Lexicon,
}

/// Configuration of a synthetic task.
///
/// `special_ids` are the entity ids (entity-copy) or the forbidden lexicon
/// (lexicon). The remaining non-reserved ids are fillers; the task assigns
/// roles (trigger, separator, topics, responses, closer) to the lowest
/// filler ids deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default = "default_vocab")]
    pub vocab: Vocab,
    #[serde(default = "default_special_ids")]
    pub special_ids: Vec<TokenId>,
    /// The mid-sequence-disfluency marker token.
    #[serde(default = "default_qq_id")]
    pub qq_id: TokenId,
    #[serde(default = "default_input_len_min")]
    pub input_len_min: usize,
    #[serde(default = "default_input_len_max")]
    pub input_len_max: usize,
    /// Probability that a base-corpus target contains unwanted tokens.
    #[serde(default = "default_corruption_rate")]
    pub corruption_rate: f64,
    #[serde(default = "default_train_size")]
    pub train_size: usize,
    #[serde(default = "default_val_size")]
    pub val_size: usize,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_vocab() -> Vocab {
    Vocab::new(32, 1, 2, 0).expect("default vocab")
}
fn default_special_ids() -> Vec<TokenId> {
    (4..12).collect()
}
fn default_qq_id() -> TokenId {
    3
}
fn default_input_len_min() -> usize {
    4
}
fn default_input_len_max() -> usize {
    8
}
fn default_corruption_rate() -> f64 {
    0.3
}
fn default_train_size() -> usize {
    5000
}
fn default_val_size() -> usize {
    500
}
fn default_test_size() -> usize {
    500
}

impl TaskSpec {
    pub fn entity_copy(seed: u64) -> Self {
        Self {
            kind: TaskKind::EntityCopy,
            vocab: default_vocab(),
            special_ids: default_special_ids(),
            qq_id: default_qq_id(),
            input_len_min: default_input_len_min(),
            input_len_max: default_input_len_max(),
            corruption_rate: default_corruption_rate(),
            train_size: default_train_size(),
            val_size: default_val_size(),
            test_size: default_test_size(),
            seed,
        }
    }

    pub fn lexicon(seed: u64) -> Self {
        Self { kind: TaskKind::Lexicon, ..Self::entity_copy(seed) }
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        self.special_ids.contains(&id)
    }

    /// Non-reserved, non-marker, non-special ids in ascending order.
    fn filler_ids(&self) -> Vec<TokenId> {
        (0..self.vocab.size() as TokenId)
            .filter(|&id| {
                !self.vocab.is_reserved(id) && id != self.qq_id && !self.is_special(id)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.special_ids.is_empty() {
            return Err(DataError::InvalidSpec("no special ids".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &id in &self.special_ids {
            if !self.vocab.contains(id) {
                return Err(DataError::InvalidSpec(format!("special id {id} out of range")));
            }
            if self.vocab.is_reserved(id) || id == self.qq_id {
                return Err(DataError::InvalidSpec(format!(
                    "special id {id} collides with a reserved or marker id"
                )));
            }
            if !seen.insert(id) {
                return Err(DataError::InvalidSpec(format!("duplicate special id {id}")));
            }
        }
        if !self.vocab.contains(self.qq_id) || self.vocab.is_reserved(self.qq_id) {
            return Err(DataError::InvalidSpec("marker id invalid".into()));
        }
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return Err(DataError::InvalidSpec(format!(
                "corruption_rate {} outside [0, 1]",
                self.corruption_rate
            )));
        }
        if self.input_len_min < 1 || self.input_len_min > self.input_len_max {
            return Err(DataError::InvalidSpec("bad input length range".into()));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(DataError::InvalidSpec("split sizes must be positive".into()));
        }
        match self.kind {
            TaskKind::EntityCopy => {
                if self.special_ids.len() < 2 {
                    return Err(DataError::InvalidSpec(
                        "entity-copy needs at least 2 entity ids".into(),
                    ));
                }
                if self.filler_ids().len() < 3 {
                    return Err(DataError::InvalidSpec(
                        "entity-copy needs a trigger, a separator, and a plain filler".into(),
                    ));
                }
            }
            TaskKind::Lexicon => {
                lexicon_layout_checked(self)?;
            }
        }
        Ok(())
    }
}

/// Role assignment inside the filler range for the entity-copy task.
struct EntityLayout {
    trigger: TokenId,
    separator: TokenId,
    plain: Vec<TokenId>,
}

/// Role assignment for the lexicon task. Every topic has a fixed response
/// token; `forbidden_topics` respond with tokens from the forbidden
/// lexicon, the rest with ordinary filler tokens. The forbidden topics sit
/// in the middle of the topic ordering so the offending token's output
/// position varies with the topic combination.
struct LexiconLayout {
    topics: Vec<TokenId>,
    /// Parallel to `topics`.
    responses: Vec<TokenId>,
    forbidden_topics: Vec<usize>,
    closer: TokenId,
    plain: Vec<TokenId>,
}

fn entity_layout(spec: &TaskSpec) -> EntityLayout {
    let f = spec.filler_ids();
    EntityLayout { trigger: f[0], separator: f[1], plain: f[2..].to_vec() }
}

fn lexicon_layout_checked(spec: &TaskSpec) -> Result<LexiconLayout, DataError> {
    let f = spec.filler_ids();
    let forbidden_count = 2.min(spec.special_ids.len());
    // topics(n) + clean responses(n − forbidden) + closer + ≥1 plain
    let n = ((f.len() + forbidden_count).saturating_sub(2) / 2).min(8);
    if n < 3 || n <= forbidden_count {
        return Err(DataError::InvalidSpec(format!(
            "lexicon task needs more filler ids (have {})",
            f.len()
        )));
    }
    let clean_count = n - forbidden_count;
    let topics = f[..n].to_vec();
    let clean_responses = f[n..n + clean_count].to_vec();
    let closer = f[n + clean_count];
    let plain = f[n + clean_count + 1..].to_vec();
    if plain.is_empty() {
        return Err(DataError::InvalidSpec("lexicon task needs a plain filler".into()));
    }
    // spread the forbidden topics through the ordering
    let forbidden_topics: Vec<usize> =
        (0..forbidden_count).map(|i| (i + 1) * n / (forbidden_count + 1)).collect();
    let mut responses = Vec::with_capacity(n);
    let mut clean_iter = clean_responses.into_iter();
    let mut forbidden_iter = spec.special_ids.iter().copied();
    for i in 0..n {
        if forbidden_topics.contains(&i) {
            responses.push(forbidden_iter.next().expect("forbidden responses"));
        } else {
            responses.push(clean_iter.next().expect("clean responses"));
        }
    }
    Ok(LexiconLayout { topics, responses, forbidden_topics, closer, plain })
}

fn lexicon_layout(spec: &TaskSpec) -> LexiconLayout {
    lexicon_layout_checked(spec).expect("spec validated")
}

/// A named split of (input, output) pairs; outputs end with EOS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub split: String,
    pub pairs: Vec<(Vec<TokenId>, Vec<TokenId>)>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Vec<TokenId>> {
        self.pairs.iter().map(|(i, _)| i)
    }
}

pub struct GeneratedCorpora {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

fn mix_seed(seed: u64, salt: u64, index: u64) -> u64 {
    let mut z = seed
        ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministically generate the three splits.
pub fn generate_corpus(spec: &TaskSpec) -> Result<GeneratedCorpora, DataError> {
    spec.validate()?;
    let make = |name: &str, salt: u64, size: usize| -> Corpus {
        let pairs = (0..size)
            .map(|i| {
                let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(spec.seed, salt, i as u64));
                generate_example(spec, &mut rng)
            })
            .collect();
        Corpus { split: name.to_string(), pairs }
    };
    Ok(GeneratedCorpora {
        train: make("train", 1, spec.train_size),
        val: make("val", 2, spec.val_size),
        test: make("test", 3, spec.test_size),
    })
}

fn generate_example(spec: &TaskSpec, rng: &mut ChaCha20Rng) -> (Vec<TokenId>, Vec<TokenId>) {
    match spec.kind {
        TaskKind::EntityCopy => generate_entity_copy(spec, rng),
        TaskKind::Lexicon => generate_lexicon(spec, rng),
    }
}

fn generate_entity_copy(spec: &TaskSpec, rng: &mut ChaCha20Rng) -> (Vec<TokenId>, Vec<TokenId>) {
    let layout = entity_layout(spec);
    let max_entities = 3.min(spec.special_ids.len() - 1);
    let count = rng.gen_range(1..=max_entities);
    let mut entities: Vec<TokenId> = spec
        .special_ids
        .choose_multiple(rng, count)
        .copied()
        .collect();
    entities.sort_unstable();
    let corrupted = rng.gen_bool(spec.corruption_rate);

    let len = rng
        .gen_range(spec.input_len_min..=spec.input_len_max)
        .max(count + usize::from(corrupted) + 1);
    let mut input: Vec<TokenId> = entities.clone();
    if corrupted {
        input.push(layout.trigger);
    }
    while input.len() < len {
        input.push(*layout.plain.choose(rng).expect("plain fillers"));
    }
    input.shuffle(rng);

    let mut output = Vec::new();
    for (i, &e) in entities.iter().enumerate() {
        if i > 0 {
            output.push(layout.separator);
        }
        output.push(e);
    }
    if corrupted {
        // the "hallucinated" entity: smallest special id absent from the input
        let absent = spec
            .special_ids
            .iter()
            .copied()
            .filter(|e| !entities.contains(e))
            .min()
            .expect("at least one absent entity");
        output.push(layout.separator);
        output.push(absent);
    }
    output.push(spec.vocab.eos());
    (input, output)
}

fn generate_lexicon(spec: &TaskSpec, rng: &mut ChaCha20Rng) -> (Vec<TokenId>, Vec<TokenId>) {
    let layout = lexicon_layout(spec);
    let clean: Vec<usize> =
        (0..layout.topics.len()).filter(|i| !layout.forbidden_topics.contains(i)).collect();
    let max_topics = 4.min(clean.len());
    let count = rng.gen_range(2.min(max_topics)..=max_topics);
    let corrupted = rng.gen_bool(spec.corruption_rate);
    // corrupted examples swap one clean topic for a forbidden-response topic
    let mut topic_idx: Vec<usize> = rand::seq::index::sample(rng, clean.len(), count)
        .iter()
        .map(|i| clean[i])
        .collect();
    if corrupted {
        let f = *layout.forbidden_topics.choose(rng).expect("forbidden topics");
        topic_idx[0] = f;
    }
    topic_idx.sort_unstable();

    let len = rng.gen_range(spec.input_len_min..=spec.input_len_max).max(count + 1);
    let mut input: Vec<TokenId> = topic_idx.iter().map(|&i| layout.topics[i]).collect();
    while input.len() < len {
        input.push(*layout.plain.choose(rng).expect("plain fillers"));
    }
    input.shuffle(rng);

    let mut output: Vec<TokenId> = topic_idx.iter().map(|&i| layout.responses[i]).collect();
    output.push(layout.closer);
    output.push(spec.vocab.eos());
    (input, output)
}

/// Rule-based token annotation.
///
/// entity-copy: every output position holding a special id absent from the
/// input is negative. lexicon: every output position holding a special id
/// is negative, even if the input contained it. The realized token itself
/// is the negative set.
pub fn annotate(input: &[TokenId], output: &[TokenId], spec: &TaskSpec) -> Vec<TokenAnnotation> {
    output
        .iter()
        .enumerate()
        .filter(|(_, &tok)| match spec.kind {
            TaskKind::EntityCopy => spec.is_special(tok) && !input.contains(&tok),
            TaskKind::Lexicon => spec.is_special(tok),
        })
        .map(|(position, &tok)| TokenAnnotation {
            position,
            negative_ids: NegativeSet::new(vec![tok]),
        })
        .collect()
}

/// Greedy-decode each corpus input with `model` and annotate the
/// generations: the update dataset is built from the model's own outputs,
/// not the gold targets.
pub fn build_update_dataset<M: SequenceModel>(
    model: &M,
    inputs: &Corpus,
    spec: &TaskSpec,
    decode_max_len: usize,
) -> Result<Vec<AnnotatedSequence>, DataError> {
    inputs
        .inputs()
        .map(|input| {
            let generation = greedy_decode(model, input, decode_max_len);
            let annotations = annotate(input, &generation, spec);
            Ok(AnnotatedSequence::new(input.clone(), generation, annotations)?)
        })
        .collect()
}

/// One JSONL record: `{"input": [...], "output": [...], "neg": [[pos, [ids]], ...]}`.
#[derive(Debug, Serialize, Deserialize)]
struct JsonRecord {
    input: Vec<TokenId>,
    output: Vec<TokenId>,
    #[serde(default)]
    neg: Vec<(usize, Vec<TokenId>)>,
}

pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (input, output) in &corpus.pairs {
        let rec =
            JsonRecord { input: input.clone(), output: output.clone(), neg: Vec::new() };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path, split: &str) -> Result<Corpus, DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut pairs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line)?;
        pairs.push((rec.input, rec.output));
    }
    Ok(Corpus { split: split.to_string(), pairs })
}

pub fn write_annotated(seqs: &[AnnotatedSequence], path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for seq in seqs {
        let rec = JsonRecord {
            input: seq.input.clone(),
            output: seq.output.clone(),
            neg: seq
                .annotations
                .iter()
                .map(|a| (a.position, a.negative_ids.ids().to_vec()))
                .collect(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_annotated(path: &Path) -> Result<Vec<AnnotatedSequence>, DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut seqs = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonRecord = serde_json::from_str(&line)?;
        let annotations = rec
            .neg
            .into_iter()
            .map(|(position, ids)| TokenAnnotation {
                position,
                negative_ids: NegativeSet::new(ids),
            })
            .collect();
        seqs.push(AnnotatedSequence::new(rec.input, rec.output, annotations)?);
    }
    Ok(seqs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corruption_free_corpus_has_no_negatives() {
        let mut spec = TaskSpec::lexicon(9);
        spec.corruption_rate = 0.0;
        spec.train_size = 200;
        spec.val_size = 20;
        spec.test_size = 20;
        let corpora = generate_corpus(&spec).unwrap();
        for corpus in [&corpora.train, &corpora.val, &corpora.test] {
            for (input, output) in &corpus.pairs {
                assert!(annotate(input, output, &spec).is_empty());
            }
        }
    }

    #[test]
    fn fully_corrupted_corpus_flags_every_output() {
        for spec in [TaskSpec::entity_copy(4), TaskSpec::lexicon(4)] {
            let mut spec = spec;
            spec.corruption_rate = 1.0;
            spec.train_size = 100;
            spec.val_size = 10;
            spec.test_size = 10;
            let corpora = generate_corpus(&spec).unwrap();
            for (input, output) in &corpora.train.pairs {
                assert!(
                    !annotate(input, output, &spec).is_empty(),
                    "unflagged corrupted output {output:?} for input {input:?}"
                );
            }
        }
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let spec = TaskSpec::entity_copy(77);
        let a = generate_corpus(&spec).unwrap();
        let b = generate_corpus(&spec).unwrap();
        assert_eq!(a.train.pairs, b.train.pairs);
        assert_eq!(a.val.pairs, b.val.pairs);
        assert_eq!(a.test.pairs, b.test.pairs);
        let other = generate_corpus(&TaskSpec::entity_copy(78)).unwrap();
        assert_ne!(a.train.pairs, other.train.pairs);
    }

    #[test]
    fn split_sizes_match_spec_exactly() {
        let mut spec = TaskSpec::lexicon(0);
        spec.train_size = 41;
        spec.val_size = 13;
        spec.test_size = 7;
        let corpora = generate_corpus(&spec).unwrap();
        assert_eq!(corpora.train.len(), 41);
        assert_eq!(corpora.val.len(), 13);
        assert_eq!(corpora.test.len(), 7);
    }

    #[test]
    fn outputs_end_with_eos_and_ids_in_range() {
        for spec in [TaskSpec::entity_copy(5), TaskSpec::lexicon(5)] {
            let mut spec = spec;
            spec.train_size = 200;
            spec.val_size = 10;
            spec.test_size = 10;
            let corpora = generate_corpus(&spec).unwrap();
            for (input, output) in &corpora.train.pairs {
                assert_eq!(*output.last().unwrap(), spec.vocab.eos());
                assert_eq!(output.iter().filter(|&&t| t == spec.vocab.eos()).count(), 1);
                for &t in input.iter().chain(output) {
                    assert!(spec.vocab.contains(t));
                }
            }
        }
    }

    #[test]
    fn annotation_examples() {
        let spec = TaskSpec::entity_copy(0);
        // no special ids in output
        assert!(annotate(&[4, 12], &[13, 2], &spec).is_empty());
        // e3 := id 6 absent from input appears at position 4
        let found = annotate(&[4, 5, 12], &[4, 13, 5, 13, 6, 2], &spec);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].position, 4);
        assert_eq!(found[0].negative_ids.ids(), &[6]);
        // twice absent: two annotations
        let twice = annotate(&[4], &[6, 13, 6, 2], &spec);
        assert_eq!(twice.len(), 2);
        assert_eq!((twice[0].position, twice[1].position), (0, 2));

        // lexicon flags outputs regardless of input
        let lex = TaskSpec::lexicon(0);
        let found = annotate(&[4, 16], &[23, 4, 15, 2], &lex);
        assert_eq!(found.len(), 1);
        assert_eq!(found[0].position, 1);
        assert_eq!(found[0].negative_ids.ids(), &[4]);
    }

    #[test]
    fn annotation_ids_stay_within_special_set() {
        for spec in [TaskSpec::entity_copy(11), TaskSpec::lexicon(11)] {
            let mut spec = spec;
            spec.train_size = 300;
            spec.val_size = 10;
            spec.test_size = 10;
            let corpora = generate_corpus(&spec).unwrap();
            for (input, output) in &corpora.train.pairs {
                for a in annotate(input, output, &spec) {
                    for &id in a.negative_ids.ids() {
                        assert!(spec.is_special(id));
                    }
                }
            }
        }
    }

    #[test]
    fn update_dataset_from_fixed_emitter() {
        // a model that always emits entity id 6 then EOS flags every input
        // lacking 6
        let spec = TaskSpec::entity_copy(0);
        let mut model = crate::model::TabularModel::new(spec.vocab.clone(), 2);
        let corpora = {
            let mut s = spec.clone();
            s.train_size = 30;
            s.val_size = 5;
            s.test_size = 5;
            generate_corpus(&s).unwrap()
        };
        let mut emit6 = vec![crate::model::ZERO_CONDITIONAL_SCORE; spec.vocab.size()];
        emit6[6] = 0.0;
        let mut emit_eos = vec![crate::model::ZERO_CONDITIONAL_SCORE; spec.vocab.size()];
        emit_eos[spec.vocab.eos() as usize] = 0.0;
        for input in corpora.train.inputs() {
            model.set_scores(input, &[], &emit6);
            model.set_scores(input, &[6], &emit_eos);
        }
        let update = build_update_dataset(&model, &corpora.train, &spec, 8).unwrap();
        for seq in &update {
            assert_eq!(seq.output, vec![6, spec.vocab.eos()]);
            let expect_flag = !seq.input.contains(&6);
            assert_eq!(!seq.annotations.is_empty(), expect_flag);
        }
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = {
            let mut s = TaskSpec::lexicon(3);
            s.train_size = 25;
            s.val_size = 5;
            s.test_size = 5;
            s
        };
        let corpora = generate_corpus(&spec).unwrap();
        let path = dir.path().join("train.jsonl");
        write_corpus(&corpora.train, &path).unwrap();
        let back = read_corpus(&path, "train").unwrap();
        assert_eq!(back.pairs, corpora.train.pairs);

        let annotated: Vec<AnnotatedSequence> = corpora
            .train
            .pairs
            .iter()
            .map(|(i, o)| {
                AnnotatedSequence::new(i.clone(), o.clone(), annotate(i, o, &spec)).unwrap()
            })
            .collect();
        let apath = dir.path().join("update.jsonl");
        write_annotated(&annotated, &apath).unwrap();
        let back = read_annotated(&apath).unwrap();
        assert_eq!(back, annotated);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = TaskSpec::entity_copy(0);
        spec.corruption_rate = 1.5;
        assert!(matches!(generate_corpus(&spec), Err(DataError::InvalidSpec(_))));

        let mut spec = TaskSpec::entity_copy(0);
        spec.special_ids = vec![0]; // collides with PAD
        assert!(matches!(generate_corpus(&spec), Err(DataError::InvalidSpec(_))));

        let mut spec = TaskSpec::entity_copy(0);
        spec.special_ids = (3..30).collect(); // collides with the marker id
        assert!(matches!(generate_corpus(&spec), Err(DataError::InvalidSpec(_))));
    }
}
