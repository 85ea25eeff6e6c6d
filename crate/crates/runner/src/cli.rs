//! Command-line interface.
//!
//! Exit codes: 0 success, 1 input error (bad flags, unreadable or invalid
//! inputs, mismatched files), 2 internal failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser as ClapParser, Subcommand};
use ra_core::dataset::{build_ft_dataset, read_jsonl, read_manifest, write_ft_manifest, BaseDecision, Caption, DatasetError};
use ra_core::parser::default_parser;
use ra_core::reward::ReflConfig;
use ra_core::toy_rl::{train, RlError};
use ra_core::{GroundTruthRecord, Taxonomy};
use thiserror::Error;

use crate::client::{HttpClient, RetryPolicy};
use crate::collect::{collect_responses, read_responses, CollectOptions, ResponseFileError};
use crate::config::{ConfigError, RunConfig};
use crate::score::{audit, audit_jsonl, evaluate, score, sweep, ScoreError};

#[derive(Debug, ClapParser)]
#[command(name = "ra", version, about = "Reflection-aware anomaly detection: scoring, rewards, datasets, toy GRPO")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Benchmark metrics per scene, as a text table and CSV
    Score(ScoreArgs),
    /// Per-sample reward breakdown as JSON lines
    RewardAudit(ScoredInputs),
    /// Build the fine-tuning JSONL from a manifest, base-model decisions and captions
    BuildFt(BuildFtArgs),
    /// Collect model responses from a chat-completions endpoint
    Collect(CollectArgs),
    /// Localization Hard-F1 across IoU thresholds
    SweepIou(SweepArgs),
    /// Train the toy keep/reflect policy with GRPO
    TrainToy(TrainArgs),
}

#[derive(Debug, Args)]
pub struct ScoredInputs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub responses: PathBuf,
    /// flat TOML config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// output file (stdout if absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// type-similarity threshold for Type Hard-F1
    #[arg(long)]
    pub tau: Option<f64>,
    /// IoU threshold for Localization Hard-F1
    #[arg(long)]
    pub iou: Option<f64>,
    /// directory for report.txt, report.csv and audit.jsonl
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BuildFtArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSONL of {"id", "predicted": "yes"|"no"} from the base model
    #[arg(long)]
    pub base: PathBuf,
    /// JSONL of {"id", "think", "reflection"?}
    #[arg(long)]
    pub captions: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CollectArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// response file, also used as the cache (defaults to `cache` from the config)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub responses: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// comma-separated IoU thresholds
    #[arg(long, value_delimiter = ',')]
    pub iou: Option<Vec<f64>>,
    /// CSV output file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// reflection config (a, b, c, d, off) or a config file path
    #[arg(long)]
    pub config: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// directory for curve.csv and summary.json (curve to stdout if absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 1,
            CliError::Internal(_) => 2,
        }
    }
}

macro_rules! input_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Input(e.to_string())
            }
        }
    )*};
}

input_error!(ConfigError, DatasetError, ResponseFileError, ScoreError);

impl From<RlError> for CliError {
    fn from(e: RlError) -> Self {
        match e {
            RlError::NonFiniteGradient { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

fn write_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Internal(format!("cannot write {}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn load_manifest(path: &Path) -> Result<Vec<GroundTruthRecord>, CliError> {
    Ok(read_manifest(path, Taxonomy::bundled())?)
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    fs::write(path, body).map_err(write_error(path))
}

fn emit(out: Option<&Path>, body: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    match out {
        Some(p) => write_file(p, body),
        None => stdout
            .write_all(body.as_bytes())
            .map_err(|e| CliError::Internal(format!("stdout: {e}"))),
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Reports go to `stdout`; diagnostics go to stderr.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command, stdout: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Score(a) => cmd_score(a, stdout),
        Command::RewardAudit(a) => cmd_audit(a, stdout),
        Command::BuildFt(a) => cmd_build_ft(a),
        Command::Collect(a) => cmd_collect(a, stdout),
        Command::SweepIou(a) => cmd_sweep(a, stdout),
        Command::TrainToy(a) => cmd_train(a, stdout),
    }
}

fn cmd_score(a: ScoreArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(t) = a.tau {
        cfg.tau = t;
    }
    if let Some(t) = a.iou {
        cfg.iou = t;
    }
    cfg.validate()?;
    let manifest = load_manifest(&a.manifest)?;
    let responses = read_responses(&a.responses)?;
    let out = score(&manifest, &responses, default_parser(), &cfg.reward(), &cfg.report_options())?;
    let table = out.report.to_table();
    let csv = out.report.to_csv();
    emit(None, &format!("{table}\n{csv}"), stdout)?;
    if let Some(dir) = a.out {
        fs::create_dir_all(&dir).map_err(write_error(&dir))?;
        write_file(&dir.join("report.txt"), &table)?;
        write_file(&dir.join("report.csv"), &csv)?;
        write_file(&dir.join("audit.jsonl"), &audit_jsonl(&out.audit))?;
    }
    Ok(())
}

fn cmd_audit(a: ScoredInputs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let manifest = load_manifest(&a.manifest)?;
    let responses = read_responses(&a.responses)?;
    let evals = evaluate(&manifest, &responses, default_parser())?;
    let lines = audit(&evals, default_parser(), &cfg.reward());
    emit(a.out.as_deref(), &audit_jsonl(&lines), stdout)
}

fn cmd_build_ft(a: BuildFtArgs) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let manifest = load_manifest(&a.manifest)?;
    let base: Vec<BaseDecision> = read_jsonl(&a.base)?;
    let captions: Vec<Caption> = read_jsonl(&a.captions)?;
    let built = build_ft_dataset(&manifest, &base, &captions, &cfg.build())?;
    write_ft_manifest(&built, &a.out).map_err(|e| CliError::Internal(e.to_string()))?;
    eprintln!("wrote {} records to {}", built.len(), a.out.display());
    Ok(())
}

fn cmd_collect(a: CollectArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref())?;
    let cache = a
        .out
        .or_else(|| cfg.cache.clone())
        .ok_or_else(|| CliError::Input("no response file: pass --out or set `cache` in the config".into()))?;
    let endpoint = cfg
        .endpoint
        .as_deref()
        .ok_or_else(|| CliError::Input("no endpoint: set `endpoint` in the config".into()))?;
    let manifest = load_manifest(&a.manifest)?;
    let client = HttpClient::from_env(endpoint, cfg.timeout()).map_err(|e| CliError::Internal(e.to_string()))?;
    let opts = CollectOptions {
        model: cfg.model.clone(),
        concurrency: cfg.concurrency,
        retry: RetryPolicy {
            retries: cfg.retries,
            backoff: std::time::Duration::from_millis(cfg.backoff_ms),
        },
        retry_errors: cfg.retry_errors,
    };
    let image_dir = a.manifest.parent().unwrap_or(Path::new("."));
    let summary = collect_responses(&manifest, image_dir, &cache, &client, &opts)?;
    let line = serde_json::to_string(&summary).expect("summary serializes");
    emit(None, &format!("{line}\n"), stdout)
}

fn cmd_sweep(a: SweepArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(t) = a.iou {
        cfg.iou_sweep = t;
    }
    cfg.validate()?;
    if cfg.iou_sweep.is_empty() {
        return Err(CliError::Input("no IoU thresholds given".into()));
    }
    let manifest = load_manifest(&a.manifest)?;
    let responses = read_responses(&a.responses)?;
    let s = sweep(&manifest, &responses, default_parser(), &cfg.iou_sweep)?;
    let csv = s.to_csv();
    emit(None, &format!("{}\n{csv}", s.to_table()), stdout)?;
    if let Some(p) = a.out {
        write_file(&p, &csv)?;
    }
    Ok(())
}

fn cmd_train(a: TrainArgs, stdout: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = match a.config.as_deref() {
        None => RunConfig::default(),
        Some(s) => match s.parse::<ReflConfig>() {
            Ok(refl) => RunConfig { refl_config: refl, ..RunConfig::default() },
            Err(_) => RunConfig::load(Path::new(s))?,
        },
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    let env = cfg.toy_env();
    let reward = cfg.reward();
    let outcome = train(&env, &reward, &cfg.train_options())?;
    let mut csv = Vec::new();
    outcome.write_curve_csv(&mut csv).map_err(|e| CliError::Internal(e.to_string()))?;
    let csv = String::from_utf8(csv).expect("curve CSV is UTF-8");
    let summary = serde_json::to_string_pretty(&outcome.summary_json(&env, &reward)).expect("summary serializes");
    match a.out {
        Some(dir) => {
            fs::create_dir_all(&dir).map_err(write_error(&dir))?;
            write_file(&dir.join("curve.csv"), &csv)?;
            write_file(&dir.join("summary.json"), &format!("{summary}\n"))?;
            emit(None, &format!("{summary}\n"), stdout)
        }
        None => emit(None, &csv, stdout),
    }
}
