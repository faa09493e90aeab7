//! Command-line driver for the conformal-audit pipeline.
//!
//! Every subcommand reads one JSON configuration document, optionally
//! patched by `--override KEY=VALUE` flags, and writes artifacts into
//! `--out`. Exit codes are a stable contract: 0 success, 1 usage or
//! configuration error, 2 integrity/verification failure. Any failure
//! is also recorded as JSON in `<out>/error.json`.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conformal_audit_core::error::AuditError;

#[derive(Parser)]
#[command(
    name = "conformal-audit",
    version,
    about = "Ordinal conformal prediction with group-aware calibration and \
             survey-weighted subgroup auditing",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub(crate) struct CommonArgs {
    /// JSON configuration document (experiment layout; `mechanism`
    /// expects {"base": <experiment>, "informativeness_levels": [...]}).
    #[arg(long, value_name = "PATH")]
    pub(crate) config: PathBuf,

    /// Output directory for artifacts; created if missing.
    #[arg(long, value_name = "DIR")]
    pub(crate) out: PathBuf,

    /// Override a configuration key before validation, e.g.
    /// `--override alpha=0.2` or
    /// `--override data.generator.master_seed=7`. Repeatable. Values
    /// parse as JSON when possible, otherwise as strings. Keys absent
    /// from the configuration schema are rejected.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub(crate) overrides: Vec<String>,

    /// Shorthand for overriding the master seed (`base.master_seed`
    /// for `mechanism`). Explicit --override flags win over it.
    #[arg(long, value_name = "N")]
    pub(crate) seed: Option<u64>,

    /// Suppress table output; artifacts are still written.
    #[arg(long)]
    pub(crate) quiet: bool,
}

#[derive(Args)]
pub(crate) struct ReportArgs {
    /// Experiment output directory to render.
    #[arg(long, value_name = "DIR")]
    pub(crate) out: PathBuf,

    /// Suppress table output; the report CSV files are still written.
    #[arg(long)]
    pub(crate) quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Load the configuration and its data source, run every check,
    /// and write a validation summary.
    Validate(CommonArgs),
    /// Generate the train/calibration/test splits and write them.
    Split(CommonArgs),
    /// Fit each configured model on the first split's training
    /// partition and write its probability matrix.
    Fit(CommonArgs),
    /// Calibrate thresholds for every model and method on the first
    /// split and write the threshold files.
    Calibrate(CommonArgs),
    /// Run the first split end to end and print its per-group audit.
    Audit(CommonArgs),
    /// Run the full multi-split experiment.
    Experiment(CommonArgs),
    /// Run the experiment across predictor informativeness levels
    /// (synthetic data sources only).
    Mechanism(CommonArgs),
    /// Render tables from an existing experiment directory.
    Report(ReportArgs),
}

fn exit_code_for(err: &AuditError) -> u8 {
    match err {
        AuditError::Integrity(_) => 2,
        _ => 1,
    }
}

fn error_kind(err: &AuditError) -> &'static str {
    match err {
        AuditError::Schema(_) => "schema",
        AuditError::Validation(_) => "validation",
        AuditError::Config(_) => "config",
        AuditError::Integrity(_) => "integrity",
        AuditError::Infeasible(_) => "infeasible",
        AuditError::Io(_) => "io",
        AuditError::Csv(_) => "csv",
        AuditError::Json(_) => "json",
    }
}

/// Record the failure as JSON next to the artifacts it interrupted.
fn write_error_json(out: &std::path::Path, err: &AuditError) {
    let body = serde_json::json!({
        "error": err.to_string(),
        "kind": error_kind(err),
        "exit_code": exit_code_for(err),
    });
    if std::fs::create_dir_all(out).is_ok() {
        let _ = std::fs::write(
            out.join("error.json"),
            format!("{}\n", serde_json::to_string_pretty(&body).unwrap()),
        );
    }
}

/// Restore the default SIGPIPE disposition so piping into `head` or a
/// pager terminates the process quietly instead of panicking on a
/// closed stdout.
fn reset_sigpipe() {
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

fn main() -> ExitCode {
    reset_sigpipe();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Keep clap's rendering but remap usage failures from
            // clap's default exit 2 onto the documented exit 1.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let (out, result) = match &cli.command {
        Command::Validate(a) => (a.out.clone(), commands::cmd_validate(a)),
        Command::Split(a) => (a.out.clone(), commands::cmd_split(a)),
        Command::Fit(a) => (a.out.clone(), commands::cmd_fit(a)),
        Command::Calibrate(a) => (a.out.clone(), commands::cmd_calibrate(a)),
        Command::Audit(a) => (a.out.clone(), commands::cmd_audit(a)),
        Command::Experiment(a) => (a.out.clone(), commands::cmd_experiment(a)),
        Command::Mechanism(a) => (a.out.clone(), commands::cmd_mechanism(a)),
        Command::Report(a) => (a.out.clone(), commands::cmd_report(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            write_error_json(&out, &err);
            ExitCode::from(exit_code_for(&err))
        }
    }
}
