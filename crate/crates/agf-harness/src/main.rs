//! `agf` binary: `agf train|bench|spectral|gradcheck --config <path>
//! [--out <dir>] [--seed <u64>]`.
//!
//! Exit codes: 0 all verdicts passed, 1 at least one verdict failed,
//! 2 usage or config error.

use std::path::Path;
use std::process::ExitCode;

use agf_harness::cli::{parse_args, CliArgs};
use agf_harness::commands::{
    cmd_bench, cmd_gradcheck, cmd_spectral, cmd_train, CommandOutput, HarnessError,
};
use agf_harness::report::VerdictStatus;

fn run(cli: &CliArgs) -> Result<CommandOutput, HarnessError> {
    let raw = std::fs::read_to_string(&cli.config)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", cli.config.display())))?;
    let value: serde_json::Value = serde_json::from_str(&raw).map_err(|e| {
        HarnessError::Config(format!("{} is not valid JSON: {e}", cli.config.display()))
    })?;
    match cli.command.as_str() {
        "train" => cmd_train(&value, cli.seed),
        "bench" => cmd_bench(&value, cli.seed),
        "spectral" => cmd_spectral(&value, cli.seed),
        "gradcheck" => cmd_gradcheck(&value, cli.seed),
        _ => unreachable!("command validated during argument parsing"),
    }
}

fn write_outputs(out: &CommandOutput, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(e.to_string()))?;
    for (name, report) in &out.reports {
        let json = report
            .to_validated_json()
            .map_err(|e| HarnessError::Io(format!("report {name} failed validation: {e}")))?;
        let path = dir.join(name);
        std::fs::write(&path, json).map_err(|e| HarnessError::Io(e.to_string()))?;
        println!("wrote {}", path.display());
        for v in &report.verdicts {
            let tag = match v.status {
                VerdictStatus::Pass => "PASS",
                VerdictStatus::Fail => "FAIL",
                VerdictStatus::Skipped => "SKIP",
            };
            println!("  [{tag}] {}", v.name);
        }
    }
    for (name, contents) in &out.files {
        let path = dir.join(name);
        std::fs::write(&path, contents).map_err(|e| HarnessError::Io(e.to_string()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = match parse_args(&args) {
        Ok(cli) => cli,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    let output = match run(&cli) {
        Ok(out) => out,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = write_outputs(&output, &cli.out_dir) {
        eprintln!("{e}");
        return ExitCode::from(2);
    }
    if output.any_failure() {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}
