//! Command-line front door for the attention-filter experiments: runs
//! training, wall-clock scaling benchmarks, the spectral property suites,
//! and gradient checks, writing schema-validated JSON reports plus CSV
//! curves.

pub mod bench;
pub mod cli;
pub mod commands;
pub mod report;

pub use commands::{
    cmd_bench, cmd_gradcheck, cmd_spectral, cmd_train, CommandOutput, HarnessError,
};
pub use report::{validate_report, RunReport, Verdict, VerdictStatus};
