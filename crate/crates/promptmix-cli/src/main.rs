//! Command-line driver: loads a run config, applies flag overrides, and
//! dispatches to the pipeline stages. All interesting behavior lives in
//! promptmix-core; this binary only parses, prints, and maps errors to
//! exit codes.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use promptmix_core::pipeline::{
    cmd_denoise, cmd_evaluate, cmd_generate, cmd_train_student, cmd_tune, run_all, RunConfig,
    RunPaths, StageOutcome,
};
use promptmix_core::{Error, EvalReport, MixStrategy, Result};

#[derive(Parser)]
#[command(
    name = "promptmix",
    version,
    about = "Controlled data augmentation: tune soft prompts against a frozen \
             language model, synthesize a filtered corpus, train a student, \
             and evaluate the result"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every stage. Overrides apply on top of the config file,
/// so a sweep can vary one knob without editing TOML.
#[derive(Args)]
struct CommonArgs {
    /// Run config TOML.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Override the run-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the run directory.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    /// Override the attribute-mixing strategy
    /// (concat|pooling|attention|bottleneck|convolution).
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<MixStrategy>,
    /// Override the tuning step budget.
    #[arg(long)]
    max_steps: Option<usize>,
    /// Override the per-seed generation quota.
    #[arg(long)]
    n_per_seed: Option<usize>,
    /// Override the over-generation factor.
    #[arg(long)]
    overgen: Option<f64>,
    /// Skip candidate weighting and filtering.
    #[arg(long)]
    no_denoise: bool,
    /// Drop the shared instruction prefix from assembled inputs.
    #[arg(long)]
    no_instruction: bool,
    /// Drop the serialized metadata line.
    #[arg(long)]
    no_metadata: bool,
    /// Drop the mixed attribute prompt.
    #[arg(long)]
    no_attribute_prompt: bool,
    /// Drop retrieved exemplars.
    #[arg(long)]
    no_exemplars: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Tune the prompt bank and mixer against the frozen teacher.
    Tune(CommonArgs),
    /// Synthesize candidates from the tuned bank, then weight and filter.
    Generate {
        #[command(flatten)]
        common: CommonArgs,
        /// Generate from this checkpoint instead of the run's tuned bank.
        #[arg(long, value_name = "PATH")]
        bank: Option<PathBuf>,
    },
    /// Rerun weighting and filtering over the stored raw candidates.
    Denoise(CommonArgs),
    /// Train the downstream student on merged real and synthetic data.
    TrainStudent {
        #[command(flatten)]
        common: CommonArgs,
        /// Baseline: train on real data only.
        #[arg(long)]
        no_syn: bool,
    },
    /// Score the synthesized corpus and write the evaluation report.
    Evaluate(CommonArgs),
    /// All stages in order: tune, generate, train-student, evaluate.
    RunAll(CommonArgs),
}

fn parse_strategy(raw: &str) -> std::result::Result<MixStrategy, String> {
    match raw {
        "concat" => Ok(MixStrategy::Concat),
        "pooling" => Ok(MixStrategy::Pooling),
        "attention" => Ok(MixStrategy::Attention),
        "bottleneck" => Ok(MixStrategy::Bottleneck),
        "convolution" => Ok(MixStrategy::Convolution),
        other => Err(format!(
            "unknown strategy '{other}' (expected concat, pooling, attention, \
             bottleneck, or convolution)"
        )),
    }
}

fn load_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(run_dir) = &args.run_dir {
        cfg.run_dir = run_dir.clone();
    }
    if let Some(strategy) = args.strategy {
        cfg.tune.strategy = strategy;
    }
    if let Some(max_steps) = args.max_steps {
        cfg.tune.max_steps = max_steps;
    }
    if let Some(n_per_seed) = args.n_per_seed {
        cfg.generate.n_per_seed = n_per_seed;
    }
    if let Some(overgen) = args.overgen {
        cfg.generate.overgen_factor = overgen;
    }
    cfg.ablation.no_denoise |= args.no_denoise;
    cfg.ablation.no_instruction |= args.no_instruction;
    cfg.ablation.no_metadata |= args.no_metadata;
    cfg.ablation.no_attribute_prompt |= args.no_attribute_prompt;
    cfg.ablation.no_exemplars |= args.no_exemplars;
    Ok(cfg)
}

fn print_outcome(outcome: &StageOutcome) {
    println!("[{}] {}", outcome.stage, outcome.summary);
    for artifact in &outcome.artifacts {
        println!("  wrote {}", artifact.display());
    }
}

fn print_eval_table(cfg: &RunConfig) -> Result<()> {
    let path = RunPaths::new(&cfg.run_dir).eval_report();
    let raw = fs::read_to_string(&path)?;
    let report: EvalReport = serde_json::from_str(&raw)
        .map_err(|e| Error::Corrupt(format!("eval report {}: {e}", path.display())))?;
    println!("{}", report.render_table());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Tune(common) => {
            let cfg = load_config(&common)?;
            print_outcome(&cmd_tune(&cfg)?);
        }
        Command::Generate { common, bank } => {
            let cfg = load_config(&common)?;
            print_outcome(&cmd_generate(&cfg, bank.as_deref())?);
        }
        Command::Denoise(common) => {
            let cfg = load_config(&common)?;
            print_outcome(&cmd_denoise(&cfg)?);
        }
        Command::TrainStudent { common, no_syn } => {
            let cfg = load_config(&common)?;
            print_outcome(&cmd_train_student(&cfg, no_syn)?);
        }
        Command::Evaluate(common) => {
            let cfg = load_config(&common)?;
            print_outcome(&cmd_evaluate(&cfg)?);
            print_eval_table(&cfg)?;
        }
        Command::RunAll(common) => {
            let cfg = load_config(&common)?;
            for outcome in run_all(&cfg)? {
                print_outcome(&outcome);
            }
            print_eval_table(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
