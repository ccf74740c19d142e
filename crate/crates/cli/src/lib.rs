//! Command-line front end for `lfm-core`.

pub mod args;
pub mod bench;
mod commands;
pub mod error;
pub mod manifest;
pub mod overrides;
pub mod plot;

pub use args::{Cli, Command};
pub use commands::{cmd_fid, cmd_pairs, cmd_sample, cmd_stats, cmd_train, rejection_report};
pub use error::{CliError, Result};

/// Runs one parsed command line.
pub fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Pairs(a) => cmd_pairs(&a),
        Command::Fid(a) => cmd_fid(&a).map(|_| ()),
        Command::Sample(a) => cmd_sample(&a).map(|_| ()),
        Command::Bench2d(a) => bench::cmd_bench2d(&a).map(|_| ()),
        Command::Stats(a) => cmd_stats(&a),
    }
}

/// The explicit seed, else `LFM_SEED`, else 0.
pub fn resolve_seed(explicit: Option<u64>) -> Result<u64> {
    if let Some(s) = explicit {
        return Ok(s);
    }
    match std::env::var("LFM_SEED") {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Config(format!("LFM_SEED must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}
