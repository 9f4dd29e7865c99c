//! The `lrt` command line: train, eval, bench and analyze.
//!
//! Machine-readable results go to stdout as JSON; progress and human tables
//! go to stderr. Exit codes: 0 success, 1 runtime failure, 2 usage or
//! configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bench::run_bench;
use crate::corpus::{load_split, read_tag_file, write_split, CorpusError};
use crate::evaluation::{classify_unc_errors, evaluate, ErrorReport, EvalError, Metrics};
use crate::model::ModelError;
use crate::training::{self, load_checkpoint, predict_corpus, ConfigError, TrainConfig, TrainError};

#[derive(Debug, Parser)]
#[command(name = "lrt", version, about = "Joint intent detection and slot filling with a layered-refine Transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and keep the best validation checkpoint.
    Train(TrainArgs),
    /// Score a model (or a prediction directory) against a gold split.
    Eval(EvalArgs),
    /// Measure batch-size-one latency with the refine step on and off.
    Bench(BenchArgs),
    /// Uncoordinated-slot error analysis of predicted tags.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory with train/ and valid/ (or dev/) splits.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long, requires = "data", conflicts_with = "pred")]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Prediction directory (seq.in, seq.out, label) to score instead of a model.
    #[arg(long, requires = "gold")]
    pub pred: Option<PathBuf>,
    /// Gold directory for `--pred`.
    #[arg(long)]
    pub gold: Option<PathBuf>,
    /// Write the model's predictions in dataset format to this directory.
    #[arg(long)]
    pub dump_pred: Option<PathBuf>,
    /// Skip the refine step at inference.
    #[arg(long)]
    pub no_lrm: bool,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 50)]
    pub warmup: usize,
    #[arg(long, default_value_t = 1)]
    pub repeat: usize,
    /// Only time the first N utterances.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Predicted `seq.out` file or a directory containing one.
    #[arg(long)]
    pub pred: PathBuf,
    /// Gold `seq.out` file or a directory containing one.
    #[arg(long)]
    pub gold: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Train(TrainError::Config(_) | TrainError::MissingCheckpoint(_)) => 2,
            CliError::Train(TrainError::Model(ModelError::InvalidConfig(_))) => 2,
            _ => 1,
        }
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{what} directory {} does not exist", path.display())))
    }
}

fn pct(x: f64) -> f64 {
    (x * 1e4).round() / 1e2
}

fn error_json(r: &ErrorReport) -> Value {
    json!({
        "slot_errors": r.slot_errors,
        "uncoordinated": r.uncoordinated,
        "bi_errors": r.bi_errors,
        "ib_errors": r.ib_errors,
        "other_unc": r.other_unc,
        "uncoordinated_share": r.uncoordinated_share(),
    })
}

/// Metrics as printed by `eval`; percentages rounded to two decimals.
pub fn metrics_json(m: &Metrics, utterances: usize) -> Value {
    json!({
        "utterances": utterances,
        "intent_accuracy": pct(m.intent_accuracy),
        "slot_f1": pct(m.slot.f1),
        "slot_precision": pct(m.slot.precision),
        "slot_recall": pct(m.slot.recall),
        "overall_accuracy": pct(m.overall_accuracy),
        "errors": error_json(&m.errors),
    })
}

fn metrics_table(m: &Metrics) -> String {
    format!(
        "intent acc  {:6.2}\nslot F1     {:6.2}  (P {:.2} R {:.2})\noverall acc {:6.2}\nslot errors {}  uncoordinated {}  BI {}  IB {}  other {}\n",
        100.0 * m.intent_accuracy,
        100.0 * m.slot.f1,
        100.0 * m.slot.precision,
        100.0 * m.slot.recall,
        100.0 * m.overall_accuracy,
        m.errors.slot_errors,
        m.errors.uncoordinated,
        m.errors.bi_errors,
        m.errors.ib_errors,
        m.errors.other_unc,
    )
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = TrainConfig::load(args.config.as_deref(), &args.overrides)?;
    if let Some(d) = &args.data {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(o) = &args.out {
        cfg.out_dir = Some(o.clone());
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let data_dir = cfg.data_dir.clone().ok_or_else(|| CliError::Usage("--data (or data_dir) is required".into()))?;
    let out_dir = cfg.out_dir.clone().ok_or_else(|| CliError::Usage("--out (or out_dir) is required".into()))?;
    require_dir(&data_dir, "data")?;
    let (train, valid) = training::load_training_data(&data_dir)?;
    writeln!(err, "training on {} utterances, validating on {}", train.len(), valid.len())?;
    let outcome = training::train_with(&cfg, &train, &valid, Some(&out_dir), &mut |e| {
        let _ = writeln!(
            err,
            "epoch {:3}  loss {:.4}  valid intent {:.2}  slot F1 {:.2}  overall {:.2}  unc {}{}",
            e.epoch,
            e.loss,
            100.0 * e.valid_intent_accuracy,
            100.0 * e.valid_slot_f1,
            100.0 * e.valid_overall_accuracy,
            e.valid_uncoordinated,
            if e.best { "  *" } else { "" }
        );
    })?;
    let best = outcome.history.iter().find(|e| e.epoch == outcome.best_epoch);
    let report = json!({
        "out_dir": out_dir,
        "epochs": outcome.history.len(),
        "best_epoch": outcome.best_epoch,
        "valid_intent_accuracy": best.map(|e| pct(e.valid_intent_accuracy)),
        "valid_slot_f1": best.map(|e| pct(e.valid_slot_f1)),
        "valid_overall_accuracy": best.map(|e| pct(e.valid_overall_accuracy)),
    });
    writeln!(out, "{}", serde_json::to_string_pretty(&report).expect("json"))?;
    Ok(())
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let (pred, gold) = match (&args.model, &args.pred) {
        (Some(model_dir), None) => {
            let data = args.data.as_ref().ok_or_else(|| CliError::Usage("--model needs --data".into()))?;
            require_dir(model_dir, "model")?;
            require_dir(data, "data")?;
            let ck = load_checkpoint(model_dir)?;
            let gold = load_split(data, &args.split)?;
            let refine = ck.model.config.use_lrm && !args.no_lrm;
            let pred = predict_corpus(&ck.model, &ck.store, &ck.vocab, &gold, args.batch_size, refine)?;
            if let Some(dir) = &args.dump_pred {
                write_split(dir, &pred)?;
            }
            (pred, gold)
        }
        (None, Some(pred_dir)) => {
            let gold_dir = args.gold.as_ref().ok_or_else(|| CliError::Usage("--pred needs --gold".into()))?;
            require_dir(pred_dir, "prediction")?;
            require_dir(gold_dir, "gold")?;
            (load_split(pred_dir, "")?, load_split(gold_dir, "")?)
        }
        _ => return Err(CliError::Usage("give either --model with --data, or --pred with --gold".into())),
    };
    let m = evaluate(&pred, &gold)?;
    write!(err, "{}", metrics_table(&m))?;
    writeln!(out, "{}", serde_json::to_string_pretty(&metrics_json(&m, gold.len())).expect("json"))?;
    Ok(())
}

fn cmd_bench(args: &BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    require_dir(&args.model, "model")?;
    require_dir(&args.data, "data")?;
    let ck = load_checkpoint(&args.model)?;
    let mut examples = load_split(&args.data, &args.split)?;
    if let Some(n) = args.limit {
        examples.truncate(n);
    }
    let r = run_bench(&ck.model, &ck.store, &ck.vocab, &examples, args.warmup, args.repeat)?;
    writeln!(
        err,
        "{} utterances x {}: with refine {:.3} ms, without {:.3} ms, ratio {:.4}",
        r.utterances, r.repeat, r.with_lrm.mean_ms, r.without_lrm.mean_ms, r.ratio
    )?;
    writeln!(out, "{}", serde_json::to_string_pretty(&r).expect("json"))?;
    Ok(())
}

/// Tag sequences and, when a sibling `seq.in` exists, the tokens.
fn load_tags(path: &Path) -> Result<(Vec<Vec<String>>, Option<Vec<Vec<String>>>), CliError> {
    let (tag_file, dir) = if path.is_dir() {
        (path.join("seq.out"), path.to_path_buf())
    } else {
        (path.to_path_buf(), path.parent().map(Path::to_path_buf).unwrap_or_default())
    };
    if !tag_file.is_file() {
        return Err(CliError::Usage(format!("{} does not exist", tag_file.display())));
    }
    let tags = read_tag_file(&tag_file)?;
    let tokens = dir.join("seq.in");
    let tokens = if tokens.is_file() { Some(crate::corpus::read_token_file(&tokens)?) } else { None };
    Ok((tags, tokens))
}

fn cmd_analyze(args: &AnalyzeArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let (pred, pred_tokens) = load_tags(&args.pred)?;
    let (gold, gold_tokens) = load_tags(&args.gold)?;
    let report = classify_unc_errors(&pred, &gold)?;
    let tokens = gold_tokens.or(pred_tokens);
    writeln!(
        err,
        "slot errors {}  uncoordinated {}  BI {}  IB {}  other {}",
        report.slot_errors, report.uncoordinated, report.bi_errors, report.ib_errors, report.other_unc
    )?;
    let mut cases = Vec::with_capacity(report.cases.len());
    for c in &report.cases {
        let context = tokens.as_ref().and_then(|t| t.get(c.utterance)).map(|t| t.join(" "));
        writeln!(
            err,
            "  utterance {} position {} [{:?}]  pred {}  gold {}{}",
            c.utterance + 1,
            c.position,
            c.kind,
            c.pred.join(" "),
            c.gold.join(" "),
            context.as_ref().map(|s| format!("  | {s}")).unwrap_or_default()
        )?;
        let mut v = serde_json::to_value(c).expect("json");
        if let Some(s) = context {
            v["tokens"] = Value::String(s);
        }
        cases.push(v);
    }
    let mut body = error_json(&report);
    body["cases"] = Value::Array(cases);
    writeln!(out, "{}", serde_json::to_string_pretty(&body).expect("json"))?;
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out, err),
        Command::Bench(a) => cmd_bench(a, out, err),
        Command::Analyze(a) => cmd_analyze(a, out, err),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
