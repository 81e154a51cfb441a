//! Experiment CLI: data generation, base training, generation, annotation,
//! finetuning sweeps, evaluation, curve building, and verification.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tnt_core::experiment::{
    cmd_annotate, cmd_curves, cmd_eval, cmd_finetune, cmd_gen_data, cmd_generate, cmd_pipeline,
    cmd_train_base, cmd_verify, ExperimentConfig, ExperimentError, RunContext,
};

#[derive(Parser)]
#[command(name = "tnt", about = "Targeted negative training experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel sweep cells.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Skip stages already recorded in the run manifest.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test corpora.
    GenData(StageArgs),
    /// Train the base model with the log-likelihood objective.
    TrainBase(StageArgs),
    /// Greedy-decode the base model over one split's inputs.
    Generate {
        #[command(flatten)]
        stage: StageArgs,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Annotate the base model's generations into update datasets.
    Annotate(StageArgs),
    /// Run the method × α sweep with per-method learning-rate selection.
    Finetune(StageArgs),
    /// Evaluate all finetuned models against the original generations.
    Eval(StageArgs),
    /// Build similarity-vs-reduction frontier curves.
    Curves(StageArgs),
    /// All stages in order.
    Pipeline(StageArgs),
    /// Run the oracle and invariant suite; exit 0 iff every check passes.
    Verify {
        #[arg(long, default_value_t = 0xACCE5)]
        seed: u64,
    },
}

fn context(stage: StageArgs) -> Result<RunContext, ExperimentError> {
    let mut config = ExperimentConfig::load(&stage.config)?;
    if let Some(seed) = stage.seed {
        config.seed = seed;
        config.task.seed = seed;
    }
    let out = stage
        .out
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| ExperimentError::Config("no output directory (--out or output_dir)".into()))?;
    Ok(RunContext::new(config, out, stage.jobs, stage.resume))
}

fn run_stage(
    stage: StageArgs,
    f: impl FnOnce(&RunContext) -> Result<(), ExperimentError>,
) -> Result<(), ExperimentError> {
    let ctx = context(stage)?;
    f(&ctx)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(stage) => run_stage(stage, cmd_gen_data),
        Command::TrainBase(stage) => run_stage(stage, cmd_train_base),
        Command::Generate { stage, split } => {
            run_stage(stage, |ctx| cmd_generate(ctx, &split))
        }
        Command::Annotate(stage) => run_stage(stage, cmd_annotate),
        Command::Finetune(stage) => run_stage(stage, cmd_finetune),
        Command::Eval(stage) => run_stage(stage, cmd_eval),
        Command::Curves(stage) => run_stage(stage, cmd_curves),
        Command::Pipeline(stage) => run_stage(stage, cmd_pipeline),
        Command::Verify { seed } => {
            let (results, ok) = cmd_verify(seed);
            println!("{:<62} {:>12} {:>12}  {}", "check", "measured", "tolerance", "status");
            for check in &results {
                println!(
                    "{:<62} {:>12.3e} {:>12.3e}  {}",
                    check.name,
                    check.measured,
                    check.tolerance,
                    if check.passed { "pass" } else { "FAIL" }
                );
            }
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
