use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use emorag_core::pipeline::{run_stage, LlmMode, PipelineConfig, PipelineError, Stage, StageOptions};

/// Retrieval-augmented multimodal depression-severity regression pipeline.
///
/// Exit codes: 0 success, 1 run failure, 2 input or validation error,
/// 3 stale artifact, 4 endpoint error.
#[derive(Parser)]
#[command(name = "emorag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the seeded synthetic dataset and sentiment corpus.
    Fixture(Common),
    /// Embed the sentiment corpus and build the search index.
    Index(Common),
    /// Precompute top-k retrieval results for every sample.
    Retrieve(Common),
    /// Generate an Emotion Prompt per sample (mock or live model).
    Prompt(Common),
    /// Train the fusion model; writes checkpoint, run.json and metrics.
    Train(Common),
    /// Evaluate the trained model, or compare both prompt arms.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Train and evaluate with and without the Emotion Prompt.
        #[arg(long)]
        ablation: bool,
    },
    /// Check model gradients against central differences.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// Pipeline config (JSON). Relative paths inside resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` and `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Rebuild even if up to date; replace an existing fixture.
    #[arg(long)]
    force: bool,
    /// Overrides `llm.mode`.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Live,
    Mock,
}

fn run(stage: Stage, common: &Common, ablation: bool) -> Result<(), PipelineError> {
    let mut cfg = PipelineConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(mode) = common.mode {
        cfg.llm.mode = match mode {
            Mode::Live => LlmMode::Live,
            Mode::Mock => LlmMode::Mock,
        };
    }
    let opts = StageOptions {
        force: common.force,
        ablation,
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    run_stage(stage, &cfg, opts, &mut out)?;
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, common, ablation) = match &cli.command {
        Command::Fixture(c) => (Stage::Fixture, c, false),
        Command::Index(c) => (Stage::Index, c, false),
        Command::Retrieve(c) => (Stage::Retrieve, c, false),
        Command::Prompt(c) => (Stage::Prompt, c, false),
        Command::Train(c) => (Stage::Train, c, false),
        Command::Eval { common, ablation } => (Stage::Eval, common, *ablation),
        Command::Gradcheck(c) => (Stage::Gradcheck, c, false),
    };
    match run(stage, common, ablation) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
