use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use carma_sdde_cli::config::RunConfig;
use carma_sdde_cli::selftest::{self, Scale};
use carma_sdde_cli::{commands, CliError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "carma-sdde", version, about = "CARMA processes as stochastic delay equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    config: PathBuf,
    /// Overrides `task.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `task.output`.
    #[arg(long)]
    output: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Verify causality and invertibility and print the derived coefficients.
    Check(RunArgs),
    /// Write sampled kernels g̃, f and g̃_j.
    Kernel(RunArgs),
    /// Simulate a stationary path.
    Simulate(RunArgs),
    /// Recover driver increments from a path.
    Recover(RunArgs),
    /// Conditional-mean prediction.
    Predict(RunArgs),
    /// Run the acceptance criteria (fast subset unless --full) and check the given configs.
    Selftest {
        #[arg(long)]
        full: bool,
        configs: Vec<PathBuf>,
    },
}

fn load(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.task.seed = Some(seed);
    }
    if let Some(out) = &args.output {
        cfg.task.output = Some(out.clone());
    }
    Ok(cfg)
}

fn run(command: Command) -> Result<(), CliError> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match command {
        Command::Check(a) => commands::check(&load(&a)?, &mut out),
        Command::Kernel(a) => commands::kernel(&load(&a)?, &mut out).map(drop),
        Command::Simulate(a) => commands::simulate(&load(&a)?, &mut out).map(drop),
        Command::Recover(a) => commands::recover(&load(&a)?, &mut out).map(drop),
        Command::Predict(a) => commands::predict(&load(&a)?, &mut out).map(drop),
        Command::Selftest { full, configs } => {
            let scale = if full { Scale::Full } else { Scale::Fast };
            selftest::run(scale, &configs, &mut out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).format_timestamp(None).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = std::io::stdout().flush();
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
