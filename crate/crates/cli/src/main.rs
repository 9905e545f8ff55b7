use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use twinshield_cli::{CliError, Pipeline, PipelineConfig, Stage};

/// Digital-twin counterfactual estimation pipeline.
#[derive(Debug, Parser)]
#[command(name = "twinshield", version)]
struct Cli {
    /// Pipeline configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Draw equally many twins per treatment arm.
    #[arg(long, global = true)]
    balance_arms: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a cohort, or load the configured inputs.
    #[command(alias = "load")]
    Simulate,
    /// Multiple imputation by chained equations.
    Impute,
    /// Fit the diffusion model and draw twins.
    Synth,
    /// Fidelity and privacy audit of the twins.
    Audit,
    /// Individual and average effects.
    Estimate,
    /// Cluster-robust effect heterogeneity.
    Cate,
    /// Quantile regressions on the effects.
    Qte,
    /// Omitted-variable sensitivity and the wage sweep.
    Sense,
    /// Tables and figures.
    Report,
    /// Every enabled stage in order.
    Run,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_path(p)?,
        None => PipelineConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if cli.out.is_some() {
        cfg.out_dir = cli.out.clone();
    }
    if cli.balance_arms {
        cfg.synth.balance_arms = true;
    }
    if cfg.input.is_none() && cfg.simulate.is_none() && matches!(cli.command, Command::Simulate) {
        cfg.simulate = Some(Default::default());
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = build_config(cli)?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    let mut pipeline = Pipeline::new(cfg)?;
    let stage = match cli.command {
        Command::Run => return pipeline.run_all(),
        Command::Simulate => Stage::Load,
        Command::Impute => Stage::Impute,
        Command::Synth => Stage::Synth,
        Command::Audit => Stage::Audit,
        Command::Estimate => Stage::Estimate,
        Command::Cate => Stage::Cate,
        Command::Qte => Stage::Qte,
        Command::Sense => Stage::Sense,
        Command::Report => Stage::Report,
    };
    pipeline.run_stage(stage)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
