//! Command-line entry points.
//!
//! Every subcommand parses and validates its configuration before touching
//! the file system. Configuration problems exit with status 2, runtime
//! failures with status 1.

mod compare;
mod evaluate;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::error::Error;
use crate::synthdata::{build_bundle, read_dataset_dir, write_dataset_dir, DataConfig};
use crate::trainer::{run_with_bundle, ExperimentConfig, RunOptions};
use crate::util::read_json;

pub use compare::{
    compare_runs, load_run, CompareReport, LoadedRun, SummaryRow, TrendCheck, TrendStatus,
    CURVES_CSV, CURVES_SVG, REPORT_MD, SUMMARY_CSV, TRENDS_JSON,
};
pub use evaluate::{
    run_eval, run_pmcr, EvalCommandConfig, EvalOutput, EVAL_CSV, EVAL_JSON, PMCR_CSV, PMCR_JSON,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

#[derive(Debug, Parser)]
#[command(name = "uodlab", version, about = "Unified multi-dataset detection laboratory")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Only log errors.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Gen(ConfigArgs),
    /// Train one experiment into a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint: mAP, per-class AP and RPN recall.
    Eval(ConfigArgs),
    /// PMCR curve of a checkpoint over a threshold grid.
    Pmcr(ConfigArgs),
    /// Aggregate run directories into a comparison report.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn config_error(e: Error) -> Failure {
    Failure::Config(e.to_string())
}

/// Parse `args` (program name first), run the command and return the exit
/// status.
pub fn main_from_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(&cli);
    match dispatch(&cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            EXIT_CONFIG
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}

fn init_logging(cli: &Cli) {
    let level = if cli.quiet {
        "error"
    } else {
        match cli.verbose {
            0 => "info",
            1 => "debug",
            _ => "trace",
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn dispatch(command: &Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => {
            let cfg = EvalCommandConfig::from_file(&a.config).map_err(config_error)?;
            let out = run_eval(&cfg)?;
            info!("mAP {:.4}, RPN recall {:.4}", out.detection.map, out.recall.recall);
            write_outputs(&a.out, &out.files)
        }
        Command::Pmcr(a) => {
            let cfg = EvalCommandConfig::from_file(&a.config).map_err(config_error)?;
            let out = run_pmcr(&cfg)?;
            write_outputs(&a.out, &out)
        }
        Command::Compare(a) => {
            let report = compare_runs(&a.runs)?;
            for (path, why) in &report.skipped {
                log::warn!("skipped {}: {why}", path.display());
            }
            write_outputs(&a.out, &report.files())
        }
    }
}

fn gen(a: &ConfigArgs) -> std::result::Result<(), Failure> {
    let mut cfg: DataConfig = read_json(&a.config).map_err(config_error)?;
    if let Some(s) = a.seed {
        cfg.gen.seed = s;
    }
    let bundle = build_bundle(&cfg)?;
    let manifest = write_dataset_dir(&a.out, &bundle)?;
    info!(
        "wrote {} datasets ({} label classes) to {}",
        manifest.datasets.len(),
        manifest.label_space.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: &TrainArgs) -> std::result::Result<(), Failure> {
    let mut cfg = ExperimentConfig::from_file(&a.common.config).map_err(config_error)?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(config_error)?;
    let dir = cfg
        .dataset_dir
        .clone()
        .ok_or_else(|| Failure::Config("dataset_dir is required".into()))?;
    if !dir.is_dir() {
        return Err(Failure::Config(format!("dataset_dir {} is not a directory", dir.display())));
    }
    if let Some(t) = &cfg.offline_teacher {
        if !t.is_file() {
            return Err(Failure::Config(format!("offline_teacher {} does not exist", t.display())));
        }
    }
    let bundle = read_dataset_dir(&dir)?;
    let options = RunOptions {
        out_dir: Some(a.common.out.clone()),
        resume: a.resume,
        ..RunOptions::default()
    };
    let record = run_with_bundle(&cfg, &bundle, &options)?;
    if let Some(p) = record.final_point() {
        info!("{}: final mAP {:.4}, RPN recall {:.4}", record.label, p.val.map, p.val.rpn_recall);
    }
    Ok(())
}

/// Write every file under `out`, each via write-then-rename.
fn write_outputs(out: &Path, files: &[(String, Vec<u8>)]) -> std::result::Result<(), Failure> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, bytes) in files {
        crate::util::write_atomic(&out.join(name), bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(main_from_args(["uodlab", "train", "--bogus"]), EXIT_CONFIG);
        assert_eq!(main_from_args(["uodlab"]), EXIT_CONFIG);
        assert_eq!(main_from_args(["uodlab", "compare", "--out", "x"]), EXIT_CONFIG);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(main_from_args(["uodlab", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_config_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let code = main_from_args([
            "uodlab".into(),
            "gen".into(),
            "--config".into(),
            dir.path().join("nope.json").into_os_string(),
            "--out".into(),
            out.clone().into_os_string(),
        ]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(!out.exists());
    }
}
