//! Library side of the `panel-dml` command: configuration, runs and report
//! rendering. The binary only parses arguments and maps errors to exit codes.

pub mod config;
pub mod error;
pub mod output;
pub mod run;

pub use config::{Mode, RunConfig};
pub use error::{CliError, Kind};
pub use output::{write_atomically, Artifact};
pub use run::{run_estimate, run_simulate};

/// Run `cfg` in its configured mode and write the outputs.
pub fn execute(cfg: &RunConfig) -> Result<(), CliError> {
    let artifacts = match cfg.mode {
        Mode::Estimate => run_estimate(cfg)?,
        Mode::Simulate => run_simulate(cfg)?,
    };
    write_atomically(&cfg.output.dir, &artifacts)?;
    if let Some(table) = artifacts.iter().find(|a| a.name == "table.txt") {
        print!("{}", table.contents);
    }
    Ok(())
}
