use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rml_adapt::harness::{ExperimentConfig, Outcome, Pipeline, Stage, OUTPUT_ENV};

/// Domain-robust translation experiments: data preparation, domain
/// classifier, curriculum tasks, meta-training, fine-tuning and evaluation.
#[derive(Parser)]
#[command(name = "rml-adapt", version, after_help = format!("The {OUTPUT_ENV} environment variable overrides the config's output_dir."))]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run strictly single-threaded. Stages already run sequentially; the
    /// flag is accepted so scripts can pin that behaviour.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic cipher domains and the meta-learning split.
    Synth(Common),
    /// Read, clean and split parallel corpus files.
    Ingest(Common),
    /// Train the sentence-domain classifier.
    TrainClassifier(Common),
    /// Score meta-train sentences with the classifier.
    Score(Common),
    /// Build curriculum and random task manifests.
    Split(Common),
    /// Pretrain the domain-mixing and plain base models.
    PretrainMix(Common),
    /// Meta-train the baselines that use tasks.
    MetaTrain(Common),
    /// Fine-tune every baseline on the meta-test support sets.
    Finetune(Common),
    /// Translate the meta-test query sets and score them.
    Evaluate(Common),
    /// Cross-domain robustness matrices.
    Robustness(Common),
    /// Assemble the result tables.
    Report(Common),
    /// Run every stage in order.
    All(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, common) = match cli.command {
        Command::Synth(c) => (Some(Stage::Synth), c),
        Command::Ingest(c) => (Some(Stage::Ingest), c),
        Command::TrainClassifier(c) => (Some(Stage::TrainClassifier), c),
        Command::Score(c) => (Some(Stage::Score), c),
        Command::Split(c) => (Some(Stage::Split), c),
        Command::PretrainMix(c) => (Some(Stage::PretrainMix), c),
        Command::MetaTrain(c) => (Some(Stage::MetaTrain), c),
        Command::Finetune(c) => (Some(Stage::Finetune), c),
        Command::Evaluate(c) => (Some(Stage::Evaluate), c),
        Command::Robustness(c) => (Some(Stage::Robustness), c),
        Command::Report(c) => (Some(Stage::Report), c),
        Command::All(c) => (None, c),
    };
    let result = ExperimentConfig::load(&common.config).and_then(|cfg| {
        let p = Pipeline::new(cfg, common.seed)?;
        match stage {
            Some(s) => {
                if p.run(s)? == Outcome::UpToDate {
                    println!("{s}: up to date");
                }
            }
            None => p.run_all()?,
        }
        println!("{}", p.dir().display());
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
