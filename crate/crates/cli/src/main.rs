use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::Settings;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<latent_flow::Error> for CliError {
    fn from(e: latent_flow::Error) -> Self {
        use latent_flow::Error as E;
        let msg = e.to_string();
        match e {
            E::Diverged { .. } | E::NonFinite(_) | E::IntegrationFailed { .. } => CliError::Divergence(msg),
            E::Io(_) => CliError::Runtime(msg),
            E::Domain(_)
            | E::Dimension { .. }
            | E::OffImage { .. }
            | E::RankDeficient { .. }
            | E::OutsideSupport { .. }
            | E::Format { .. } => CliError::Validation(msg),
            E::StaleCache => CliError::Runtime(msg),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lfl", version, about = "Latent flow toolkit: synthesize, fit, train, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory holding all artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overwrite an existing dataset.
    #[arg(long, global = true)]
    force: bool,
    /// Evaluate the closed-form field instead of a trained checkpoint.
    #[arg(long, global = true)]
    analytic_field: bool,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Synthesize trajectories and write the dataset.
    Gen,
    /// Fit the polynomial projection and write error reports and the order sweep.
    Fit,
    /// Train the network and write a checkpoint and loss records.
    Train,
    /// Generate at the requested rate and horizon and score against ground truth.
    Eval,
    /// Train both objectives with equal budgets and compare PSNR.
    Ablate,
    /// Summarize existing artifacts.
    Report,
}

fn settings(cli: &Cli) -> Result<Settings, CliError> {
    let mut s = match &cli.config {
        Some(path) => Settings::load(path)?,
        None => Settings::default(),
    };
    for kv in &cli.overrides {
        s.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        s.set("seed", &seed.to_string())?;
    }
    Ok(s)
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("LFL_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("LFL_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn run(cli: &Cli) -> Result<(), CliError> {
    init_threads()?;
    let s = settings(cli)?;
    match cli.command {
        Command::Gen => commands::gen(&s, &cli.out, cli.force),
        Command::Fit => commands::fit(&s, &cli.out),
        Command::Train => commands::train(&s, &cli.out),
        Command::Eval => commands::eval(&s, &cli.out, cli.analytic_field),
        Command::Ablate => commands::ablate(&s, &cli.out),
        Command::Report => commands::report(&cli.out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("lfl: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
