//! The `qe` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or contract error,
//! 3 numeric abort. Failures print one `error[<code>]: ...` line to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::corpus::{parse_tsv_auto, read_predictions, write_predictions, PredictionSet};
use crate::encoder::{EncoderConfig, PoolingStrategy};
use crate::ensemble::{average_predictions, EnsembleSpec};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, render_leaderboard, CorrelationReport, SortKey};
use crate::model::{load_checkpoint, save_checkpoint, QEModel};
use crate::trainer::{train, TrainConfig};

pub mod footprint;

pub use footprint::{footprint, group_thousands, render_footprints, FootprintReport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "qe", version, about = "Sentence-level translation quality estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model on a labeled TSV and save the best checkpoint.
    Train(TrainArgs),
    /// Score every pair of a TSV with a checkpoint.
    Predict(PredictArgs),
    /// Correlate predictions with gold z-scores.
    Evaluate(EvaluateArgs),
    /// Average several prediction files.
    Ensemble(EnsembleArgs),
    /// Bytes on disk of a checkpoint or ensemble manifest.
    Footprint(FootprintArgs),
    /// Render leaderboard and footprint tables from JSON reports.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// d_model 64, 2 layers, max_len 128.
    Tiny,
    /// Same width, max_len 512.
    Desk,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long, default_value = "cls")]
    pooling: String,
    #[arg(long, default_value_t = 2e-5)]
    lr: f32,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Steps per evaluation round; once per epoch when omitted.
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_shuffle: bool,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    dropout: Option<f32>,
    /// Where to write the step/split/loss training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    preds: PathBuf,
    #[arg(long)]
    gold: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Defaults to the predictions file stem.
    #[arg(long)]
    method: Option<String>,
    /// Defaults to the gold file stem.
    #[arg(long)]
    pair: Option<String>,
}

#[derive(Debug, Args)]
struct EnsembleArgs {
    #[arg(long, num_args = 1.., required = true)]
    preds: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct FootprintArgs {
    #[arg(long)]
    model: PathBuf,
    /// Defaults to the file stem.
    #[arg(long)]
    name: Option<String>,
    /// Write `{"name", "bytes"}` JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Correlation reports (object or array) and footprint JSON files.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Leaderboard JSON mirror.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value = "spearman")]
    sort: String,
}

/// Parses `argv` (including the program name) and runs one subcommand.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return EXIT_OK;
            }
            let text = e.render().to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text);
            let _ = write!(stderr, "error[usage]: {text}");
            return EXIT_USAGE;
        }
    };
    match dispatch(cli.command, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let mut line = format!("error[{}]: {e}", e.code());
            if let Error::Diverged {
                best_checkpoint: Some(p),
                ..
            } = &e
            {
                line.push_str(&format!(" (best checkpoint kept at {})", p.display()));
            }
            let _ = writeln!(stderr, "{}", line.replace('\n', " "));
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_DATA
            }
        }
    }
}

fn require_exists(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::io(
                *p,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
            ));
        }
    }
    Ok(())
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(
        || path.display().to_string(),
        |s| s.to_string_lossy().into_owned(),
    )
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn dispatch(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a, stdout),
        Command::Predict(a) => cmd_predict(a, stdout),
        Command::Evaluate(a) => cmd_evaluate(a, stdout),
        Command::Ensemble(a) => cmd_ensemble(a, stdout),
        Command::Footprint(a) => cmd_footprint(a, stdout),
        Command::Report(a) => cmd_report(a, stdout),
    }
}

fn encoder_config(a: &TrainArgs) -> Result<EncoderConfig> {
    let base = match a.preset {
        Preset::Tiny => EncoderConfig::tiny(),
        Preset::Desk => EncoderConfig::default(),
    };
    let config = EncoderConfig {
        d_model: a.d_model.unwrap_or(base.d_model),
        n_heads: a.n_heads.unwrap_or(base.n_heads),
        n_layers: a.n_layers.unwrap_or(base.n_layers),
        d_ff: a.d_ff.unwrap_or(base.d_ff),
        max_len: a.max_len.unwrap_or(base.max_len),
        dropout_rate: a.dropout.unwrap_or(base.dropout_rate),
        ..base
    };
    config.validate()?;
    Ok(config)
}

fn cmd_train(a: TrainArgs, stdout: &mut dyn Write) -> Result<()> {
    require_exists(&[&a.train, &a.dev])?;
    let config = encoder_config(&a)?;
    let pooling: PoolingStrategy = a.pooling.parse()?;
    let train_cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        patience: a.patience,
        eval_every: a.eval_every,
        seed: a.seed,
        shuffle: !a.no_shuffle,
        checkpoint_path: Some(a.out.clone()),
    };
    train_cfg.validate()?;
    let train_set = parse_tsv_auto(&a.train)?;
    let dev_set = parse_tsv_auto(&a.dev)?;
    let model = QEModel::new(config, pooling, a.seed)?;
    let outcome = train(model, &train_set, &dev_set, &train_cfg)?;
    let bytes = save_checkpoint(&outcome.model, &a.out)?;
    if let Some(log) = &a.log {
        outcome.log.write(log)?;
    }
    let _ = writeln!(
        stdout,
        "steps={} eval_rounds={} best_step={} best_dev_loss={} early_stop={} bytes={}",
        outcome.steps,
        outcome.eval_rounds,
        outcome.best_step,
        outcome.early_stop.best_eval_loss,
        outcome.stopped_early,
        bytes
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs, stdout: &mut dyn Write) -> Result<()> {
    require_exists(&[&a.model, &a.input])?;
    let model = load_checkpoint(&a.model)?;
    let data = parse_tsv_auto(&a.input)?;
    let entries = data
        .pairs
        .iter()
        .map(|p| {
            Ok((
                p.segment_id.clone(),
                f64::from(model.predict(&p.source, &p.target)?),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let preds = PredictionSet::new(entries)?;
    write_predictions(&preds, &a.out)?;
    let _ = writeln!(stdout, "predicted {} segments", preds.len());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, stdout: &mut dyn Write) -> Result<()> {
    require_exists(&[&a.preds, &a.gold])?;
    let preds = read_predictions(&a.preds)?;
    let mut gold = parse_tsv_auto(&a.gold)?;
    gold.language_pair = a.pair.clone().unwrap_or_else(|| stem(&a.gold));
    let method = a.method.clone().unwrap_or_else(|| stem(&a.preds));
    let report = evaluate(&preds, &gold, &method)?;
    if let Some(path) = &a.report {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_file(path, &(json + "\n"))?;
    }
    let _ = writeln!(
        stdout,
        "{}\t{}\tspearman={:.3}\tpearson={:.3}\tn={}",
        report.method_name, report.language_pair, report.spearman_rho, report.pearson_r, report.n
    );
    Ok(())
}

fn cmd_ensemble(a: EnsembleArgs, stdout: &mut dyn Write) -> Result<()> {
    let refs: Vec<&Path> = a.preds.iter().map(PathBuf::as_path).collect();
    require_exists(&refs)?;
    let members = a.preds.iter().map(read_predictions).collect::<Result<Vec<_>>>()?;
    let names = a.preds.iter().map(|p| stem(p)).collect();
    let spec = EnsembleSpec::new(names, members)?;
    let out = average_predictions(&spec)?;
    write_predictions(&out, &a.out)?;
    let _ = writeln!(
        stdout,
        "averaged {} members over {} segments",
        spec.len(),
        out.len()
    );
    Ok(())
}

fn cmd_footprint(a: FootprintArgs, stdout: &mut dyn Write) -> Result<()> {
    require_exists(&[&a.model])?;
    let bytes = footprint(&a.model)?;
    let report = FootprintReport {
        name: a.name.clone().unwrap_or_else(|| stem(&a.model)),
        bytes,
    };
    if let Some(path) = &a.out {
        let json = serde_json::to_string_pretty(&report).expect("footprint serializes");
        write_file(path, &(json + "\n"))?;
    }
    let _ = writeln!(stdout, "{bytes}");
    Ok(())
}

/// Reports found in one JSON input.
#[derive(Debug, Default)]
pub struct ReportInputs {
    pub correlations: Vec<CorrelationReport>,
    pub footprints: Vec<FootprintReport>,
}

fn classify(value: serde_json::Value, path: &Path, into: &mut ReportInputs) -> Result<()> {
    let bad = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        message: msg,
    };
    match value {
        serde_json::Value::Array(items) => {
            for item in items {
                classify(item, path, into)?;
            }
            Ok(())
        }
        serde_json::Value::Object(ref map) if map.contains_key("bytes") => {
            into.footprints
                .push(serde_json::from_value(value).map_err(|e| bad(e.to_string()))?);
            Ok(())
        }
        serde_json::Value::Object(ref map) if map.contains_key("spearman") => {
            into.correlations
                .push(serde_json::from_value(value).map_err(|e| bad(e.to_string()))?);
            Ok(())
        }
        other => Err(bad(format!("not a correlation or footprint report: {other}"))),
    }
}

pub fn load_report_inputs(paths: &[PathBuf]) -> Result<ReportInputs> {
    let mut inputs = ReportInputs::default();
    for path in paths {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        classify(value, path, &mut inputs)?;
    }
    Ok(inputs)
}

/// Leaderboard section followed by footprint section, whichever exist.
pub fn render_report(inputs: &ReportInputs, key: SortKey) -> Result<(String, Option<String>)> {
    let mut text = String::new();
    let mut json = None;
    if !inputs.correlations.is_empty() {
        let board = render_leaderboard(&inputs.correlations, key)?;
        text.push_str(&board.text);
        json = Some(board.to_json());
    }
    if !inputs.footprints.is_empty() {
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&render_footprints(&inputs.footprints));
    }
    Ok((text, json))
}

fn cmd_report(a: ReportArgs, stdout: &mut dyn Write) -> Result<()> {
    let refs: Vec<&Path> = a.inputs.iter().map(PathBuf::as_path).collect();
    require_exists(&refs)?;
    let key: SortKey = a.sort.parse()?;
    let inputs = load_report_inputs(&a.inputs)?;
    let (text, json) = render_report(&inputs, key)?;
    match &a.out {
        Some(path) => write_file(path, &text)?,
        None => {
            let _ = write!(stdout, "{text}");
        }
    }
    if let Some(path) = &a.json {
        let json = json.ok_or_else(|| Error::Contract("no correlation reports to mirror as JSON".into()))?;
        write_file(path, &(json + "\n"))?;
    }
    Ok(())
}
