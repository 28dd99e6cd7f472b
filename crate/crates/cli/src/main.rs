use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use panel_dml_cli::{execute, CliError, Mode, RunConfig};

#[derive(Parser)]
#[command(
    name = "panel-dml",
    version,
    about = "Debiased average-derivative estimation for panel data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate effects on a panel read from CSV.
    Estimate(RunArgs),
    /// Run a Monte Carlo study on simulated panels.
    Simulate(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    config: PathBuf,
    /// Override a configuration key, e.g. `--set simulation.replications=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads; all cores by default.
    #[arg(long)]
    threads: Option<usize>,
    /// Replace the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

fn run(mode: Mode, args: RunArgs) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(&args.config, &args.overrides)?;
    if cfg.mode != mode {
        return Err(CliError::config(format!(
            "config declares mode `{:?}` but the `{:?}` command was used",
            cfg.mode, mode
        )));
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = args.output_dir {
        cfg.output.dir = dir;
    }
    if let Some(n) = args.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::config(format!("cannot size thread pool: {e}")))?;
    }
    execute(&cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (mode, args) = match cli.command {
        Command::Estimate(a) => (Mode::Estimate, a),
        Command::Simulate(a) => (Mode::Simulate, a),
    };
    match run(mode, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.kind().exit_code())
        }
    }
}
