use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vitmerge::SimilarityStrategy;
use vitmerge_cli::config::{self, Method};
use vitmerge_cli::pipeline::{self, MergeOptions, Paths};
use vitmerge_cli::Result;

#[derive(Parser)]
#[command(
    name = "vitmerge",
    version,
    about = "Train small vision transformers on synthetic tasks and merge them",
    propagate_version = true
)]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Output directory; overrides experiment.out_dir from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Run for this single seed instead of the config's full seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate and store every task's train and test split.
    GenData,
    /// Train the shared base model on the union of all tasks.
    Pretrain,
    /// Train one model per task, from the base or from scratch.
    Finetune {
        /// Start each task model from a fresh initialization instead of
        /// the shared base.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Train the task-ID gate on a fraction of each test split.
    TrainGate {
        /// Fraction of each test split to train on (defaults to the
        /// config's gate.frac).
        #[arg(long, value_name = "FRAC")]
        gate_frac: Option<f64>,
    },
    /// Collect activation gram matrices over the gate's training pool.
    Grams {
        /// Pool fraction (defaults to the config's gate.frac).
        #[arg(long, value_name = "FRAC")]
        gate_frac: Option<f64>,
        /// Use the from-scratch task models.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Score per-block weight similarity across the fine-tuned models.
    Similarity {
        /// Scoring strategy: concat-combined, concat-separate,
        /// separate-combined or separate-separate (defaults to the
        /// config's similarity.strategy).
        #[arg(long, value_parser = parse_strategy)]
        strategy: Option<SimilarityStrategy>,
    },
    /// Merge the task models with one method.
    Merge {
        /// avgmean, taskarith, regmean, gated-avgmean or gated-regmean
        /// (defaults to the config's recipe.method).
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
        /// Gated methods: how many attention and MLP blocks to gate;
        /// comma-separated list sweeps several values (defaults to the
        /// config's sweep.m).
        #[arg(long, value_delimiter = ',', value_name = "M,...")]
        m: Option<Vec<usize>>,
        /// Task-arithmetic scaling (defaults to the config's recipe.lambda).
        #[arg(long)]
        lambda: Option<f64>,
        /// Gram damping for regmean (defaults to the config's recipe.alpha).
        #[arg(long)]
        alpha: Option<f64>,
        /// Merge the from-scratch task models.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Evaluate stored artifacts on the task test splits.
    Eval {
        /// Evaluate just this checkpoint or gated-merge manifest instead
        /// of everything under the output directory.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Aggregate evaluation rows into the final report.
    Report,
    /// Run the whole pipeline: data, training, merges, evaluation, report.
    RunAll,
}

fn parse_method(s: &str) -> Result<Method> {
    Method::from_name(s)
}

fn parse_strategy(s: &str) -> Result<SimilarityStrategy> {
    Ok(SimilarityStrategy::from_name(s)?)
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli.config.ok_or_else(|| {
        vitmerge_cli::Error::Config("pass --config <experiment.toml>".into())
    })?;
    let cfg = config::load(&config_path)?;
    let paths = Paths::new(cli.out.unwrap_or_else(|| cfg.experiment.out_dir.clone()));
    let seeds = match cli.seed {
        Some(s) => vec![s],
        None => cfg.experiment.seeds.clone(),
    };

    match cli.command {
        Command::GenData => {
            pipeline::gen_data(&cfg, &paths)?;
        }
        Command::Pretrain => pipeline::pretrain(&cfg, &paths, &seeds)?,
        Command::Finetune { from_scratch } => {
            pipeline::finetune(&cfg, &paths, &seeds, from_scratch)?
        }
        Command::TrainGate { gate_frac } => {
            pipeline::train_gate(&cfg, &paths, &seeds, gate_frac)?
        }
        Command::Grams { gate_frac, from_scratch } => {
            pipeline::grams(&cfg, &paths, &seeds, gate_frac, from_scratch)?
        }
        Command::Similarity { strategy } => {
            pipeline::similarity(&cfg, &paths, &seeds, strategy)?
        }
        Command::Merge { method, m, lambda, alpha, from_scratch } => {
            let opts = MergeOptions { method, ms: m, lambda, alpha, scratch: from_scratch };
            pipeline::merge(&cfg, &paths, &seeds, &opts)?
        }
        Command::Eval { model } => match model {
            Some(path) => {
                let row = pipeline::eval_model(&cfg, &paths, &path)?;
                println!("{}", serde_json::to_string_pretty(&row)?);
            }
            None => {
                pipeline::eval(&cfg, &paths, &seeds)?;
            }
        },
        Command::Report => {
            let report = pipeline::report(&cfg, &paths, &seeds)?;
            println!("{}", vitmerge_cli::report::render_text(&report));
        }
        Command::RunAll => {
            let report = pipeline::run_all(&cfg, &paths)?;
            println!("{}", vitmerge_cli::report::render_text(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .format_target(false)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
