//! Argument parsing for the `agf` binary.

use std::path::PathBuf;

pub const USAGE: &str =
    "usage: agf <train|bench|spectral|gradcheck> --config <path> [--out <dir>] [--seed <u64>]";

#[derive(Debug, Clone, PartialEq)]
pub struct CliArgs {
    pub command: String,
    pub config: PathBuf,
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
}

pub fn parse_args(args: &[String]) -> Result<CliArgs, String> {
    if args.is_empty() {
        return Err(USAGE.to_string());
    }
    let command = args[0].clone();
    if !matches!(
        command.as_str(),
        "train" | "bench" | "spectral" | "gradcheck"
    ) {
        return Err(format!("unknown command '{command}'\n{USAGE}"));
    }
    let mut config: Option<PathBuf> = None;
    let mut out_dir = PathBuf::from("agf-out");
    let mut seed: Option<u64> = None;
    let mut i = 1;
    while i < args.len() {
        match args[i].as_str() {
            "--config" => {
                i += 1;
                config = Some(PathBuf::from(args.get(i).ok_or("--config needs a path")?));
            }
            "--out" => {
                i += 1;
                out_dir = PathBuf::from(args.get(i).ok_or("--out needs a directory")?);
            }
            "--seed" => {
                i += 1;
                let raw = args.get(i).ok_or("--seed needs a value")?;
                seed = Some(raw.parse().map_err(|_| format!("bad seed '{raw}'"))?);
            }
            other => return Err(format!("unknown argument '{other}'\n{USAGE}")),
        }
        i += 1;
    }
    Ok(CliArgs {
        command,
        config: config.ok_or(format!("--config is required\n{USAGE}"))?,
        out_dir,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_full_invocation() {
        let args = parse_args(&strs(&[
            "spectral", "--config", "cfg.json", "--out", "results", "--seed", "7",
        ]))
        .unwrap();
        assert_eq!(args.command, "spectral");
        assert_eq!(args.config, PathBuf::from("cfg.json"));
        assert_eq!(args.out_dir, PathBuf::from("results"));
        assert_eq!(args.seed, Some(7));
    }

    #[test]
    fn defaults_out_dir_and_seed() {
        let args = parse_args(&strs(&["train", "--config", "t.json"])).unwrap();
        assert_eq!(args.out_dir, PathBuf::from("agf-out"));
        assert_eq!(args.seed, None);
    }

    #[test]
    fn rejects_unknown_command_and_flags() {
        assert!(parse_args(&strs(&["destroy", "--config", "x"])).is_err());
        assert!(parse_args(&strs(&["train", "--config", "x", "--frobnicate"])).is_err());
        assert!(parse_args(&strs(&["train"])).is_err());
        assert!(parse_args(&strs(&["train", "--config", "x", "--seed", "NaN"])).is_err());
        assert!(parse_args(&[]).is_err());
    }
}
