//! Orchestration for the `hgdet` command: configuration, training,
//! inference, metric reports and FROC plots.

pub mod config;
pub mod infer;
pub mod plot;
pub mod report;
pub mod train;

use std::path::PathBuf;

/// Environment variable naming the directory that holds training runs.
pub const RUN_ROOT_ENV: &str = "HGDET_RUN_ROOT";

/// `$HGDET_RUN_ROOT/<name>`, defaulting the root to `./runs`.
pub fn run_dir(name: &str) -> PathBuf {
    std::env::var_os(RUN_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
        .join(name)
}
