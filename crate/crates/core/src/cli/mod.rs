//! The `ccam` command line.
//!
//! Exit codes: 0 success, 2 bad config or arguments, 3 numeric failure,
//! 4 I/O. Failures print one line to stderr:
//! `error: kind=<config|numeric|io> code=<n> message=<text>`.

mod commands;
mod config;
mod output;

use std::ffi::OsString;
use std::path::PathBuf;
use std::time::SystemTime;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::masks::MaskRule;

pub use commands::GRADCHECK_TOLERANCE;
pub use config::{load_config, parse_override, ExperimentConfig, Precision};
pub use output::{resolve_out_dir, RunContext, RunReport, DEFAULT_OUT_DIR, OUT_DIR_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "ccam", version, about = "Causal cross-attention projector experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file; every key has a default.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a leaf key, e.g. `--set projector.n_heads=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (else $CCAM_OUT_DIR, then `output_dir`, then ./ccam-out).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print a frame mask and write it as CSV.
    Mask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rule: Option<MaskRule>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Run the projector on random frames; writes params and outputs.
    Forward {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rule: Option<MaskRule>,
        #[arg(long)]
        queries: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        tokens_per_frame: Option<usize>,
        #[arg(long)]
        precision: Option<Precision>,
    },
    /// Analytic gradients against central differences on the tiny config.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check one rule only (default: all three).
        #[arg(long)]
        rule: Option<MaskRule>,
    },
    /// Error against the continuous reference for each frame count.
    Converge {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
        #[arg(long)]
        grid_points: Option<usize>,
    },
    /// Discrepancy between frame counts on the same signal.
    Consistency {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
        #[arg(long)]
        reference: Option<usize>,
        #[arg(long)]
        grid_points: Option<usize>,
    },
    /// Train the temporal-order probe.
    Ordertask {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mask: Option<MaskRule>,
        #[arg(long)]
        tpe: Option<bool>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
}

fn kind(e: &Error) -> (&'static str, i32) {
    match e {
        Error::Io(_) | Error::Format(_) => ("io", EXIT_IO),
        e if e.is_numeric() => ("numeric", EXIT_NUMERIC),
        _ => ("config", EXIT_CONFIG),
    }
}

/// One line, `key=value` fields, message last.
pub fn error_line(e: &Error) -> String {
    let (k, code) = kind(e);
    let msg = e.to_string().replace(['\n', '\r'], " ");
    format!("error: kind={k} code={code} message={msg}")
}

pub fn exit_code(e: &Error) -> i32 {
    kind(e).1
}

fn json<T: serde::Serialize>(v: T) -> Value {
    serde_json::to_value(v).expect("flag value serializes")
}

fn push<T: serde::Serialize>(out: &mut Vec<(String, Value)>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        out.push((key.to_string(), json(v)));
    }
}

/// Subcommand name, shared flags and flag overrides as dotted keys.
fn split(cmd: Command) -> (&'static str, Common, Vec<(String, Value)>, Option<MaskRule>) {
    let mut o = Vec::new();
    match cmd {
        Command::Mask {
            common,
            rule,
            queries,
            frames,
        } => {
            push(&mut o, "projector.mask_rule", rule);
            push(&mut o, "projector.n_queries", queries);
            push(&mut o, "n_frames", frames);
            ("mask", common, o, None)
        }
        Command::Forward {
            common,
            rule,
            queries,
            frames,
            tokens_per_frame,
            precision,
        } => {
            push(&mut o, "projector.mask_rule", rule);
            push(&mut o, "projector.n_queries", queries);
            push(&mut o, "n_frames", frames);
            push(&mut o, "tokens_per_frame", tokens_per_frame);
            push(&mut o, "precision", precision);
            ("forward", common, o, None)
        }
        Command::Gradcheck { common, rule } => ("gradcheck", common, o, rule),
        Command::Converge {
            common,
            frames,
            grid_points,
        } => {
            push(&mut o, "frame_counts", frames);
            push(&mut o, "grid_points", grid_points);
            ("converge", common, o, None)
        }
        Command::Consistency {
            common,
            frames,
            reference,
            grid_points,
        } => {
            push(&mut o, "frame_counts", frames);
            push(&mut o, "reference_frames", reference);
            push(&mut o, "grid_points", grid_points);
            ("consistency", common, o, None)
        }
        Command::Ordertask {
            common,
            mask,
            tpe,
            epochs,
            lr,
        } => {
            push(&mut o, "projector.mask_rule", mask);
            push(&mut o, "projector.use_tpe", tpe);
            push(&mut o, "train.epochs", epochs);
            push(&mut o, "train.lr", lr);
            ("ordertask", common, o, None)
        }
    }
}

fn execute(cli: Cli) -> Result<String> {
    let started = SystemTime::now();
    let (subcommand, common, flag_overrides, rule) = split(cli.command);
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    let mut overrides = common.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    if let Some(seed) = common.seed {
        overrides.push(("seed".into(), json(seed)));
    }
    overrides.extend(flag_overrides);
    cfg.apply_overrides(&overrides)?;
    cfg.validate()?;

    let ctx = RunContext {
        subcommand,
        digest: cfg.digest(),
        out_dir: resolve_out_dir(common.out.as_deref(), &cfg),
        config: cfg,
        started,
    };
    match subcommand {
        "mask" => commands::mask(&ctx),
        "forward" => commands::forward(&ctx),
        "gradcheck" => commands::gradcheck(&ctx, rule),
        "converge" => commands::converge(&ctx),
        "consistency" => commands::consistency(&ctx),
        "ordertask" => commands::ordertask(&ctx),
        _ => unreachable!("clap only yields known subcommands"),
    }
}

/// Runs the tool on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return EXIT_OK;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("bad arguments").trim_start_matches("error: ").to_string();
            eprintln!("{}", error_line(&Error::Config(first)));
            return EXIT_CONFIG;
        }
    };
    match execute(cli) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::Invalid("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::NonFinite("x")), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Diverged { epoch: 1, loss: f64::NAN }), EXIT_NUMERIC);
        assert_eq!(exit_code(&Error::Io(std::io::Error::other("x"))), EXIT_IO);
    }

    #[test]
    fn error_line_is_single_line() {
        let line = error_line(&Error::Config("a\nb".into()));
        assert!(!line.contains('\n'));
        assert!(line.starts_with("error: kind=config code=2 message="));
    }

    #[test]
    fn bad_flag_is_config_error() {
        assert_eq!(run(["ccam", "mask", "--bogus"]), EXIT_CONFIG);
        assert_eq!(run(["ccam", "mask", "--rule", "diagonal"]), EXIT_CONFIG);
    }
}
