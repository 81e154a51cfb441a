//! End-to-end experiment pipeline.
//!
//! Stages, each resumable from its artifacts in the run directory:
//!
//! 1. `gen-data`    → `data/{train,val,test}.jsonl`
//! 2. `train-base`  → `base/checkpoint.json`, `base/log.ndjson`
//! 3. `generate`    → `original/{split}_generations.jsonl` (greedy outputs
//!    of the base model; these are both the update-training material and
//!    the similarity references)
//! 4. `annotate`    → `update/{train,val}.jsonl` (annotated generations)
//! 5. `finetune`    → `cells/<method>_lr<lr>_a<alpha>/…` — per method, a
//!    learning-rate sweep at α = 1 picks the rate, which is then reused
//!    across the α grid
//! 6. `eval`        → `reports.csv`
//! 7. `curves`      → `curves.csv` (per-method and composite frontiers)
//!
//! `manifest.json` records completed stages, corpus hashes, and per-method
//! learning rates; with `--resume`, completed work is skipped as long as
//! the config hash matches. Every cell is deterministic in its derived
//! seed, so an interrupted-and-resumed run produces byte-identical reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distributions::TokenDistribution;
use crate::eval::{
    bleu, count_random_qq, count_word_repeats, frontier_curve, rouge_l, sequence_accuracy,
    unwanted_rate, write_curves, write_reports, EvalError, EvalReport, FrontierCurve,
    SimilarityField,
};
use crate::model::{
    greedy_decode, load_checkpoint, save_checkpoint, AnyModel, ModelError, TabularModel,
    TinyNeuralModel,
};
use crate::objective::{Method, ObjectiveConfig};
use crate::oracles::CheckResult;
use crate::synthdata::{
    build_update_dataset, generate_corpus, read_annotated, read_corpus, write_annotated,
    write_corpus, Corpus, DataError, TaskSpec,
};
use crate::trainer::{train, write_training_log, TrainConfig, TrainError};
use crate::TokenId;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("missing artifact {0}; run the earlier pipeline stages first")]
    MissingArtifact(PathBuf),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(String),
}

impl ExperimentError {
    /// Process exit code class: 2 configuration, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::MissingArtifact(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    TinyNeural,
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_model_kind")]
    pub kind: ModelKind,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_model_kind() -> ModelKind {
    ModelKind::TinyNeural
}
fn default_embed_dim() -> usize {
    16
}
fn default_hidden_dim() -> usize {
    48
}
fn default_window() -> usize {
    3
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            kind: default_model_kind(),
            embed_dim: default_embed_dim(),
            hidden_dim: default_hidden_dim(),
            window: default_window(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    #[serde(default)]
    pub model: ModelConfig,
    pub base_train: TrainConfig,
    pub update_train: TrainConfig,
    /// Objectives to sweep; each entry's α is replaced by the grid.
    #[serde(default = "default_update_methods")]
    pub update_methods: Vec<ObjectiveConfig>,
    #[serde(default = "default_alpha_grid")]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_lr_grid")]
    pub lr_grid: Vec<f64>,
    #[serde(default = "default_decode_max_len")]
    pub decode_max_len: usize,
    #[serde(default)]
    pub seed: u64,
    /// Default run directory; the CLI's `--out` overrides it.
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

fn default_update_methods() -> Vec<ObjectiveConfig> {
    Method::UPDATE_METHODS.into_iter().map(ObjectiveConfig::new).collect()
}

fn default_alpha_grid() -> Vec<f64> {
    (-4..=4).map(|e| 10f64.powi(e)).collect()
}

fn default_lr_grid() -> Vec<f64> {
    vec![1e-3, 1e-4, 1e-5, 1e-6]
}

fn default_decode_max_len() -> usize {
    16
}

impl ExperimentConfig {
    /// The stock desk-scale experiment: lexicon task, tiny neural model,
    /// step counts sized so the whole sweep finishes on one core.
    pub fn default_lexicon(seed: u64) -> Self {
        let mut base_train = TrainConfig::new(ObjectiveConfig::new(Method::Ll));
        base_train.steps = 5000;
        base_train.eval_every = 200;
        base_train.learning_rate = 3e-3;
        let mut update_train = TrainConfig::new(ObjectiveConfig::new(Method::TnFf));
        update_train.steps = 1200;
        update_train.eval_every = 200;
        Self {
            task: TaskSpec::lexicon(seed),
            model: ModelConfig::default(),
            base_train,
            update_train,
            update_methods: default_update_methods(),
            alpha_grid: default_alpha_grid(),
            lr_grid: default_lr_grid(),
            decode_max_len: default_decode_max_len(),
            seed,
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.task.validate()?;
        if self.alpha_grid.is_empty() {
            return Err(ExperimentError::Config("empty alpha grid".into()));
        }
        if self.lr_grid.is_empty() {
            return Err(ExperimentError::Config("empty learning-rate grid".into()));
        }
        if self.decode_max_len == 0 {
            return Err(ExperimentError::Config("decode_max_len must be positive".into()));
        }
        if !self.alpha_grid.iter().all(|a| a.is_finite() && *a > 0.0) {
            return Err(ExperimentError::Config("alpha grid entries must be positive".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.update_methods {
            if m.method == Method::Ll {
                return Err(ExperimentError::Config(
                    "plain log-likelihood is the base objective, not an update method".into(),
                ));
            }
            if !seen.insert(m.method) {
                return Err(ExperimentError::Config(format!(
                    "duplicate update method {}",
                    m.method
                )));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml_string().as_bytes());
        hex_digest(hasher)
    }

    fn fresh_model(&self, seed: u64) -> AnyModel {
        match self.model.kind {
            ModelKind::TinyNeural => AnyModel::TinyNeural(TinyNeuralModel::new(
                self.task.vocab.clone(),
                self.model.embed_dim,
                self.model.hidden_dim,
                self.model.window,
                seed,
            )),
            ModelKind::Tabular => {
                AnyModel::Tabular(TabularModel::new(self.task.vocab.clone(), self.model.window))
            }
        }
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn file_hash(path: &Path) -> Result<String, ExperimentError> {
    let mut hasher = Sha256::new();
    hasher.update(fs::read(path)?);
    Ok(hex_digest(hasher))
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    #[serde(default)]
    pub stages: BTreeMap<String, bool>,
    #[serde(default)]
    pub corpus_hashes: BTreeMap<String, String>,
    #[serde(default)]
    pub cells: BTreeMap<String, bool>,
    #[serde(default)]
    pub chosen_learning_rates: BTreeMap<String, f64>,
    /// Unwanted-generation rate of the base model on the update training
    /// inputs, recorded when the update dataset is built.
    #[serde(default)]
    pub baseline_train_rate: Option<f64>,
}

impl Manifest {
    fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    /// The manifest is the run's state record: always picked up when it
    /// matches the current config, discarded when the config changed.
    fn load_or_new(out: &Path, config_hash: &str) -> Result<Self, ExperimentError> {
        let path = Self::path(out);
        if path.exists() {
            let text = fs::read_to_string(&path)?;
            let manifest: Manifest =
                serde_json::from_str(&text).map_err(|e| ExperimentError::Serde(e.to_string()))?;
            if manifest.config_hash == config_hash {
                return Ok(manifest);
            }
        }
        Ok(Manifest { config_hash: config_hash.to_string(), ..Default::default() })
    }

    fn save(&self, out: &Path) -> Result<(), ExperimentError> {
        let text =
            serde_json::to_string_pretty(self).map_err(|e| ExperimentError::Serde(e.to_string()))?;
        let tmp = out.join("manifest.json.tmp");
        fs::write(&tmp, text)?;
        fs::rename(&tmp, Self::path(out))?;
        Ok(())
    }

    fn stage_done(&self, stage: &str) -> bool {
        self.stages.get(stage).copied().unwrap_or(false)
    }

    fn mark_stage(&mut self, out: &Path, stage: &str) -> Result<(), ExperimentError> {
        self.stages.insert(stage.to_string(), true);
        self.save(out)
    }
}

/// Everything a pipeline stage needs to run.
pub struct RunContext {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub jobs: usize,
    pub resume: bool,
}

impl RunContext {
    pub fn new(config: ExperimentConfig, out: PathBuf, jobs: usize, resume: bool) -> Self {
        Self { config, out, jobs, resume }
    }

    fn manifest(&self) -> Result<Manifest, ExperimentError> {
        Manifest::load_or_new(&self.out, &self.config.content_hash())
    }

    fn data_path(&self, split: &str) -> PathBuf {
        self.out.join("data").join(format!("{split}.jsonl"))
    }

    fn generations_path(&self, split: &str) -> PathBuf {
        self.out.join("original").join(format!("{split}_generations.jsonl"))
    }

    fn update_path(&self, split: &str) -> PathBuf {
        self.out.join("update").join(format!("{split}.jsonl"))
    }

    fn base_checkpoint_path(&self) -> PathBuf {
        self.out.join("base").join("checkpoint.json")
    }

    fn cell_dir(&self, cell: &CellId) -> PathBuf {
        self.out.join("cells").join(cell.dir_name())
    }

    fn require(&self, path: PathBuf) -> Result<PathBuf, ExperimentError> {
        if path.exists() {
            Ok(path)
        } else {
            Err(ExperimentError::MissingArtifact(path))
        }
    }

    fn load_base_model(&self) -> Result<AnyModel, ExperimentError> {
        Ok(load_checkpoint(&self.require(self.base_checkpoint_path())?)?)
    }

    fn snapshot_config(&self) -> Result<(), ExperimentError> {
        fs::create_dir_all(&self.out)?;
        fs::write(self.out.join("config.toml"), self.config.to_toml_string())?;
        Ok(())
    }
}

fn mix_seed(seed: u64, salt: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(salt.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Write the three corpus splits.
pub fn cmd_gen_data(ctx: &RunContext) -> Result<(), ExperimentError> {
    ctx.config.validate()?;
    ctx.snapshot_config()?;
    let mut manifest = ctx.manifest()?;
    if manifest.stage_done("gen-data") {
        return Ok(());
    }
    fs::create_dir_all(ctx.out.join("data"))?;
    let corpora = generate_corpus(&ctx.config.task)?;
    for corpus in [&corpora.train, &corpora.val, &corpora.test] {
        let path = ctx.data_path(&corpus.split);
        write_corpus(corpus, &path)?;
        manifest.corpus_hashes.insert(corpus.split.clone(), file_hash(&path)?);
    }
    manifest.mark_stage(&ctx.out, "gen-data")
}

fn base_train_config(ctx: &RunContext) -> TrainConfig {
    let mut cfg = ctx.config.base_train.clone();
    cfg.objective.method = Method::Ll;
    cfg.seed = mix_seed(ctx.config.seed, "base-train");
    cfg
}

/// Train the base model on the gold corpus with the plain log-likelihood
/// objective.
pub fn cmd_train_base(ctx: &RunContext) -> Result<(), ExperimentError> {
    let mut manifest = ctx.manifest()?;
    if manifest.stage_done("train-base") {
        return Ok(());
    }
    let train_corpus = read_corpus(&ctx.require(ctx.data_path("train"))?, "train")?;
    let val_corpus = read_corpus(&ctx.require(ctx.data_path("val"))?, "val")?;
    let to_seqs = |corpus: &Corpus| -> Result<Vec<_>, ExperimentError> {
        corpus
            .pairs
            .iter()
            .map(|(input, output)| {
                crate::objective::AnnotatedSequence::unannotated(input.clone(), output.clone())
                    .map_err(|e| ExperimentError::Config(e.to_string()))
            })
            .collect()
    };
    let train_seqs = to_seqs(&train_corpus)?;
    let val_seqs = to_seqs(&val_corpus)?;
    let init = ctx.config.fresh_model(mix_seed(ctx.config.seed, "base-init"));
    let cfg = base_train_config(ctx);
    let result = train(&init, &train_seqs, &val_seqs, &cfg)?;
    fs::create_dir_all(ctx.out.join("base"))?;
    save_checkpoint(&result.model, &ctx.base_checkpoint_path())?;
    write_training_log(&result.log, &ctx.out.join("base").join("log.ndjson"))?;
    manifest.mark_stage(&ctx.out, "train-base")
}

/// Greedy-decode the base model over one split's inputs.
pub fn cmd_generate(ctx: &RunContext, split: &str) -> Result<(), ExperimentError> {
    let mut manifest = ctx.manifest()?;
    let stage = format!("generate-{split}");
    if manifest.stage_done(&stage) {
        return Ok(());
    }
    let corpus = read_corpus(&ctx.require(ctx.data_path(split))?, split)?;
    let base = ctx.load_base_model()?;
    let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = corpus
        .pairs
        .iter()
        .map(|(input, _)| {
            (input.clone(), greedy_decode(&base, input, ctx.config.decode_max_len))
        })
        .collect();
    fs::create_dir_all(ctx.out.join("original"))?;
    let generated = Corpus { split: split.to_string(), pairs };
    write_corpus(&generated, &ctx.generations_path(split))?;
    manifest.mark_stage(&ctx.out, &stage)
}

/// Annotate the base model's generations into update datasets.
pub fn cmd_annotate(ctx: &RunContext) -> Result<(), ExperimentError> {
    let mut manifest = ctx.manifest()?;
    if manifest.stage_done("annotate") {
        return Ok(());
    }
    let base = ctx.load_base_model()?;
    fs::create_dir_all(ctx.out.join("update"))?;
    for split in ["train", "val"] {
        let corpus = read_corpus(&ctx.require(ctx.data_path(split))?, split)?;
        let update =
            build_update_dataset(&base, &corpus, &ctx.config.task, ctx.config.decode_max_len)?;
        if split == "train" {
            let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = update
                .iter()
                .map(|s| (s.input.clone(), s.output.clone()))
                .collect();
            manifest.baseline_train_rate = Some(unwanted_rate(&pairs, &ctx.config.task)?);
        }
        write_annotated(&update, &ctx.update_path(split))?;
    }
    manifest.mark_stage(&ctx.out, "annotate")
}

/// One sweep cell: a method trained at a particular learning rate and α.
#[derive(Debug, Clone, PartialEq)]
struct CellId {
    method: Method,
    learning_rate: f64,
    alpha: f64,
}

impl CellId {
    fn dir_name(&self) -> String {
        format!("{}_lr{:e}_a{:e}", self.method, self.learning_rate, self.alpha)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CellSummary {
    method: String,
    learning_rate: f64,
    alpha: f64,
    best_val_loss: f64,
    aborted_nonfinite: bool,
    skipped_positions: usize,
}

fn run_cell(
    ctx: &RunContext,
    cell: &CellId,
    base: &AnyModel,
    update_train: &[crate::objective::AnnotatedSequence],
    update_val: &[crate::objective::AnnotatedSequence],
) -> Result<CellSummary, ExperimentError> {
    let dir = ctx.cell_dir(cell);
    fs::create_dir_all(&dir)?;
    let mut cfg = ctx.config.update_train.clone();
    let objective_base = ctx
        .config
        .update_methods
        .iter()
        .find(|m| m.method == cell.method)
        .copied()
        .unwrap_or_else(|| ObjectiveConfig::new(cell.method));
    cfg.objective = objective_base.with_alpha(cell.alpha);
    cfg.learning_rate = cell.learning_rate;
    cfg.seed = mix_seed(ctx.config.seed, &format!("cell-{}", cell.dir_name()));
    let result = train(base, update_train, update_val, &cfg)?;
    save_checkpoint(&result.model, &dir.join("checkpoint.json"))?;
    write_training_log(&result.log, &dir.join("log.ndjson"))?;
    let summary = CellSummary {
        method: cell.method.name().to_string(),
        learning_rate: cell.learning_rate,
        alpha: cell.alpha,
        best_val_loss: result.best_val_loss,
        aborted_nonfinite: result.aborted_nonfinite,
        skipped_positions: result.skipped_positions,
    };
    let text =
        serde_json::to_string_pretty(&summary).map_err(|e| ExperimentError::Serde(e.to_string()))?;
    fs::write(dir.join("summary.json"), text)?;
    Ok(summary)
}

fn read_cell_summary(ctx: &RunContext, cell: &CellId) -> Result<CellSummary, ExperimentError> {
    let path = ctx.cell_dir(cell).join("summary.json");
    let text = fs::read_to_string(ctx.require(path)?)?;
    serde_json::from_str(&text).map_err(|e| ExperimentError::Serde(e.to_string()))
}

fn configured_methods(ctx: &RunContext) -> Vec<Method> {
    ctx.config.update_methods.iter().map(|m| m.method).collect()
}

/// The method × α sweep with per-method learning-rate selection at α = 1.
pub fn cmd_finetune(ctx: &RunContext) -> Result<(), ExperimentError> {
    let mut manifest = ctx.manifest()?;
    if manifest.stage_done("finetune") {
        return Ok(());
    }
    if ctx.config.update_methods.is_empty() {
        return manifest.mark_stage(&ctx.out, "finetune");
    }
    let base = ctx.load_base_model()?;
    let update_train = read_annotated(&ctx.require(ctx.update_path("train"))?)?;
    let update_val = read_annotated(&ctx.require(ctx.update_path("val"))?)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;

    let run_cells = |cells: &[CellId],
                     manifest: &mut Manifest|
     -> Result<Vec<CellSummary>, ExperimentError> {
        let pending: Vec<&CellId> = cells
            .iter()
            .filter(|c| !manifest.cells.get(&c.dir_name()).copied().unwrap_or(false))
            .collect();
        let results: Vec<Result<(String, CellSummary), ExperimentError>> =
            pool.install(|| {
                pending
                    .par_iter()
                    .map(|cell| {
                        run_cell(ctx, cell, &base, &update_train, &update_val)
                            .map(|s| (cell.dir_name(), s))
                    })
                    .collect()
            });
        for result in results {
            let (name, _) = result?;
            manifest.cells.insert(name, true);
        }
        manifest.save(&ctx.out)?;
        cells.iter().map(|c| read_cell_summary(ctx, c)).collect()
    };

    // learning-rate sweep at α = 1, one winner per method
    let lr_cells: Vec<CellId> = configured_methods(ctx)
        .iter()
        .flat_map(|&method| {
            ctx.config
                .lr_grid
                .iter()
                .map(move |&lr| CellId { method, learning_rate: lr, alpha: 1.0 })
        })
        .collect();
    let lr_summaries = run_cells(&lr_cells, &mut manifest)?;
    for &method in configured_methods(ctx).iter() {
        let best = lr_summaries
            .iter()
            .filter(|s| s.method == method.name())
            .min_by(|a, b| a.best_val_loss.total_cmp(&b.best_val_loss))
            .expect("lr sweep ran for every method");
        manifest.chosen_learning_rates.insert(method.name().to_string(), best.learning_rate);
    }
    manifest.save(&ctx.out)?;

    // α grid at each method's chosen rate (α = 1 already trained above)
    let alpha_cells: Vec<CellId> = configured_methods(ctx)
        .iter()
        .flat_map(|&method| {
            let lr = manifest.chosen_learning_rates[method.name()];
            ctx.config
                .alpha_grid
                .iter()
                .filter(|&&alpha| alpha != 1.0)
                .map(move |&alpha| CellId { method, learning_rate: lr, alpha })
        })
        .collect();
    run_cells(&alpha_cells, &mut manifest)?;
    manifest.mark_stage(&ctx.out, "finetune")
}

fn strip_eos(seq: &[TokenId], eos: TokenId) -> Vec<TokenId> {
    match seq.split_last() {
        Some((&last, rest)) if last == eos => rest.to_vec(),
        _ => seq.to_vec(),
    }
}

fn report_for(
    ctx: &RunContext,
    method: &str,
    alpha: Option<f64>,
    split: &str,
    inputs: &[Vec<TokenId>],
    generations: &[Vec<TokenId>],
    references: &[Vec<TokenId>],
) -> Result<EvalReport, ExperimentError> {
    let eos = ctx.config.task.vocab.eos();
    let stripped_gen: Vec<Vec<TokenId>> =
        generations.iter().map(|g| strip_eos(g, eos)).collect();
    let stripped_ref: Vec<Vec<TokenId>> =
        references.iter().map(|g| strip_eos(g, eos)).collect();
    let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> =
        inputs.iter().cloned().zip(generations.iter().cloned()).collect();
    Ok(EvalReport {
        method: method.to_string(),
        alpha,
        split: split.to_string(),
        bleu: bleu(&stripped_gen, &stripped_ref)?,
        rouge_l: rouge_l(&stripped_gen, &stripped_ref)?,
        seq_acc: sequence_accuracy(&stripped_gen, &stripped_ref)?,
        unwanted_rate: unwanted_rate(&pairs, &ctx.config.task)?,
        repeats: count_word_repeats(generations, &ctx.config.task.vocab),
        random_qq: count_random_qq(generations, ctx.config.task.qq_id, eos),
    })
}

/// Evaluate every finetuned cell (at its method's chosen rate) plus the
/// original model on the validation and test inputs, against the original
/// model's generations.
pub fn cmd_eval(ctx: &RunContext) -> Result<(), ExperimentError> {
    let mut manifest = ctx.manifest()?;
    let originals: BTreeMap<&str, Corpus> = ["val", "test"]
        .into_iter()
        .map(|split| -> Result<(&str, Corpus), ExperimentError> {
            let path = ctx.require(ctx.generations_path(split))?;
            Ok((split, read_corpus(&path, split)?))
        })
        .collect::<Result<_, _>>()?;

    let mut reports: Vec<EvalReport> = Vec::new();
    for split in ["val", "test"] {
        let corpus = &originals[split];
        let inputs: Vec<Vec<TokenId>> = corpus.inputs().cloned().collect();
        let gens: Vec<Vec<TokenId>> = corpus.pairs.iter().map(|(_, g)| g.clone()).collect();
        reports.push(report_for(ctx, "original", None, split, &inputs, &gens, &gens)?);
    }

    for &method in configured_methods(ctx).iter() {
        let lr = *manifest
            .chosen_learning_rates
            .get(method.name())
            .ok_or_else(|| ExperimentError::Config(format!("no chosen rate for {method}; run finetune first")))?;
        for &alpha in &ctx.config.alpha_grid {
            let cell = CellId { method, learning_rate: lr, alpha };
            let model = load_checkpoint(
                &ctx.require(ctx.cell_dir(&cell).join("checkpoint.json"))?,
            )?;
            for split in ["val", "test"] {
                let corpus = &originals[split];
                let inputs: Vec<Vec<TokenId>> = corpus.inputs().cloned().collect();
                let references: Vec<Vec<TokenId>> =
                    corpus.pairs.iter().map(|(_, g)| g.clone()).collect();
                let generations: Vec<Vec<TokenId>> = inputs
                    .iter()
                    .map(|input| greedy_decode(&model, input, ctx.config.decode_max_len))
                    .collect();
                reports.push(report_for(
                    ctx,
                    method.name(),
                    Some(alpha),
                    split,
                    &inputs,
                    &generations,
                    &references,
                )?);
            }
        }
    }
    write_reports(&reports, &ctx.out.join("reports.csv"))?;
    manifest.mark_stage(&ctx.out, "eval")
}

/// Split reports by split name.
fn partition_reports(reports: &[EvalReport]) -> (Vec<EvalReport>, Vec<EvalReport>) {
    let val = reports.iter().filter(|r| r.split == "val").cloned().collect();
    let test = reports.iter().filter(|r| r.split == "test").cloned().collect();
    (val, test)
}

fn method_family(name: &str) -> Option<&'static str> {
    let method = Method::parse(name)?;
    if method.is_targeted() {
        Some("tnt-composite")
    } else if Method::BASELINE_METHODS.contains(&method) {
        Some("baseline-composite")
    } else {
        None
    }
}

/// Frontier curves per method plus the two family composites.
pub fn build_curves(
    reports: &[EvalReport],
    field: SimilarityField,
) -> Result<Vec<(String, FrontierCurve)>, EvalError> {
    let (val, test) = partition_reports(reports);
    let original_rate = val
        .iter()
        .find(|r| r.method == "original")
        .map(|r| r.unwanted_rate)
        .ok_or(EvalError::EmptyCorpus)?;
    let mut curves = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for r in &val {
        if r.method != "original" && !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
    }
    for method in &methods {
        let vm: Vec<EvalReport> = val.iter().filter(|r| &r.method == method).cloned().collect();
        let tm: Vec<EvalReport> = test.iter().filter(|r| &r.method == method).cloned().collect();
        match frontier_curve(&tm, field, &vm, original_rate) {
            Ok(curve) => curves.push((method.clone(), curve)),
            Err(EvalError::NoQualifyingRun) => continue,
            Err(e) => return Err(e),
        }
    }
    for family in ["tnt-composite", "baseline-composite"] {
        let vm: Vec<EvalReport> = val
            .iter()
            .filter(|r| method_family(&r.method) == Some(family))
            .cloned()
            .collect();
        let tm: Vec<EvalReport> = test
            .iter()
            .filter(|r| method_family(&r.method) == Some(family))
            .cloned()
            .collect();
        if vm.is_empty() {
            continue;
        }
        match frontier_curve(&tm, field, &vm, original_rate) {
            Ok(curve) => curves.push((family.to_string(), curve)),
            Err(EvalError::NoQualifyingRun) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(curves)
}

pub fn cmd_curves(ctx: &RunContext) -> Result<(), ExperimentError> {
    let mut manifest = ctx.manifest()?;
    let reports = crate::eval::read_reports(&ctx.require(ctx.out.join("reports.csv"))?)?;
    let curves = build_curves(&reports, SimilarityField::Bleu)?;
    write_curves(&curves, &ctx.out.join("curves.csv"))?;
    manifest.mark_stage(&ctx.out, "curves")
}

/// All stages in order. Without `--resume`, any previous run state in the
/// directory is discarded and everything is recomputed.
pub fn cmd_pipeline(ctx: &RunContext) -> Result<(), ExperimentError> {
    if !ctx.resume {
        let manifest = Manifest::path(&ctx.out);
        if manifest.exists() {
            fs::remove_file(&manifest)?;
        }
    }
    cmd_gen_data(ctx)?;
    cmd_train_base(ctx)?;
    for split in ["train", "val", "test"] {
        cmd_generate(ctx, split)?;
    }
    cmd_annotate(ctx)?;
    cmd_finetune(ctx)?;
    cmd_eval(ctx)?;
    cmd_curves(ctx)?;
    Ok(())
}

/// The oracle and invariant suite; true iff everything passed.
pub fn cmd_verify(seed: u64) -> (Vec<CheckResult>, bool) {
    let results = crate::oracles::run_verification(seed);
    let ok = results.iter().all(|c| c.passed);
    (results, ok)
}

#[allow(dead_code)]
fn _types_used(_: TokenDistribution) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrips_through_toml() {
        let cfg = ExperimentConfig::default_lexicon(7);
        let text = cfg.to_toml_string();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn config_rejects_bad_grids_and_methods() {
        let mut cfg = ExperimentConfig::default_lexicon(0);
        cfg.alpha_grid.clear();
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))));

        let mut cfg = ExperimentConfig::default_lexicon(0);
        cfg.update_methods.push(ObjectiveConfig::new(Method::Ll));
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))));

        let mut cfg = ExperimentConfig::default_lexicon(0);
        cfg.update_methods.push(ObjectiveConfig::new(Method::TnFf));
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn default_alpha_grid_spans_powers_of_ten() {
        let grid = default_alpha_grid();
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[0], 1e-4);
        assert_eq!(grid[8], 1e4);
        assert!(grid.contains(&1.0));
    }

    #[test]
    fn cell_dir_names_are_stable() {
        let cell = CellId { method: Method::TnFLl, learning_rate: 1e-3, alpha: 10.0 };
        assert_eq!(cell.dir_name(), "tn-f+ll_lr1e-3_a1e1");
    }

    #[test]
    fn exit_codes_classify_errors() {
        assert_eq!(ExperimentError::Config("x".into()).exit_code(), 2);
        assert_eq!(ExperimentError::MissingArtifact("p".into()).exit_code(), 2);
        assert_eq!(
            ExperimentError::Serde("bad".into()).exit_code(),
            3
        );
    }
}
