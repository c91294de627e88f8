//! The `arlm` command line: `train`, `eval`, `generate` and `gradcheck`.
//!
//! Every subcommand accepts `--config FILE`, a JSON object or `key = value`
//! lines whose keys are flag names (dashes or underscores). File values are
//! applied first, so explicit flags win. `--seed` falls back to `RLM_SEED`
//! when neither the flags nor the file set it.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O or format, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::autodiff::OpTag;
use crate::corpus::{read_lines, Corpus};
use crate::error::{Error, Result};
use crate::generator::{generate, moses_detokenize, SamplerConfig};
use crate::gradsuite::{run_gradient_suite, SuiteOptions};
use crate::nn::CellKind;
use crate::regularizers::NormReduction;
use crate::trainer::{
    evaluate_perplexity, load_checkpoint, save_checkpoint, train, Checkpoint, MetricsLog, MetricsRecord,
    TrainConfig, DEFAULT_SEED,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "arlm", version, about = "RNN language models with AR/TAR regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and keep the best-validation checkpoint.
    #[command(args_override_self = true)]
    Train(TrainArgs),
    /// Perplexity of a checkpoint on a corpus file.
    #[command(args_override_self = true)]
    Eval(EvalArgs),
    /// Sample text from a checkpoint.
    #[command(args_override_self = true)]
    Generate(GenerateArgs),
    /// Finite-difference check of every gradient rule.
    #[command(args_override_self = true)]
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct HyperArgs {
    #[arg(long, alias = "lr", default_value_t = 20.0)]
    lr0: f64,
    #[arg(long, alias = "decay", default_value_t = 4.0)]
    lr_decay_divisor: f64,
    #[arg(long, alias = "epochs", default_value_t = 80)]
    max_epochs: usize,
    #[arg(long, alias = "clip", default_value_t = 10.0)]
    clip_norm: f64,
    #[arg(long, alias = "wd", default_value_t = 1e-7)]
    weight_decay: f64,
    #[arg(long, default_value_t = 20)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    eval_batch_size: usize,
    #[arg(long, default_value_t = 35)]
    bptt: usize,
    #[arg(long, default_value_t = 0.5)]
    dp: f64,
    #[arg(long, default_value_t = 0.4)]
    dp_h: f64,
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    beta: f64,
    #[arg(long, value_enum, default_value_t = NormReduction::MeanNorm)]
    reduction: NormReduction,
    #[arg(long, env = "RLM_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = CellKind::Lstm)]
    cell: CellKind,
    #[arg(long, alias = "hidden", default_value_t = 650)]
    hidden_size: usize,
    #[arg(long, alias = "layers", default_value_t = 2)]
    num_layers: usize,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    tied: bool,
    #[arg(long, default_value_t = 1e-4)]
    min_lr: f64,
}

impl HyperArgs {
    fn to_config(&self) -> TrainConfig {
        TrainConfig {
            lr0: self.lr0,
            lr_decay_divisor: self.lr_decay_divisor,
            max_epochs: self.max_epochs,
            clip_norm: self.clip_norm,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            eval_batch_size: self.eval_batch_size,
            bptt: self.bptt,
            dp: self.dp,
            dp_h: self.dp_h,
            alpha: self.alpha,
            beta: self.beta,
            reduction: self.reduction,
            seed: self.seed,
            cell: self.cell,
            hidden_size: self.hidden_size,
            num_layers: self.num_layers,
            tied: self.tied,
            min_lr: self.min_lr,
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    valid: PathBuf,
    /// Evaluated once on the best checkpoint after training.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value = "model.ckpt")]
    checkpoint: PathBuf,
    /// Line-delimited JSON, one record per epoch.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, alias = "valid", alias = "test")]
    data: PathBuf,
    /// Defaults to the checkpoint's training setting.
    #[arg(long)]
    eval_batch_size: Option<usize>,
    #[arg(long)]
    bptt: Option<usize>,
    /// Expected architecture; a checkpoint that does not fit is rejected.
    #[arg(long, value_enum)]
    cell: Option<CellKind>,
    #[arg(long, alias = "hidden")]
    hidden_size: Option<usize>,
    #[arg(long, alias = "layers")]
    num_layers: Option<usize>,
    #[arg(long, action = clap::ArgAction::Set)]
    tied: Option<bool>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, alias = "num-words", default_value_t = 100)]
    words: usize,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, env = "RLM_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Paragraphs to sample, separated by blank lines.
    #[arg(long, default_value_t = 1)]
    samples: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    cell: Option<CellKind>,
    #[arg(long, hide = true, value_parser = parse_op)]
    corrupt: Option<OpTag>,
}

fn parse_op(s: &str) -> std::result::Result<OpTag, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Exit code for an error escaping a subcommand.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Format { .. } | Error::EmptyCorpus(_) | Error::Shape { .. } | Error::Index { .. } => {
            EXIT_IO
        }
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::Domain { .. } => EXIT_NUMERIC,
    }
}

/// Parses `args` (including the program name) and runs the subcommand,
/// writing results to `out` and diagnostics to `err`.
pub fn run<W: Write, E: Write>(args: Vec<OsString>, out: &mut W, err: &mut E) -> i32 {
    let args = match splice_config_file(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return exit_code(&e);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { write!(err, "{text}") } else { write!(out, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out, err),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

/// Inserts `--key value` pairs from a `--config` file right after the
/// subcommand, where later command-line flags override them.
fn splice_config_file(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let a = a.to_string_lossy();
        if a == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else { return Ok(args) };
    if args.len() < 2 {
        return Ok(args);
    }
    let pairs = parse_config_file(&path)?;
    let mut spliced = args[..2].to_vec();
    for (key, value) in pairs {
        spliced.push(format!("--{}", key.replace('_', "-")).into());
        spliced.push(value.into());
    }
    spliced.extend_from_slice(&args[2..]);
    Ok(spliced)
}

fn parse_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = read_lines(path)?;
    let bad = |detail: String| Error::Usage(format!("config file {}: {detail}", path.display()));
    let mut pairs = Vec::new();
    if text.trim_start().starts_with('{') {
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        for (k, v) in map {
            let value = match v {
                serde_json::Value::String(s) => s,
                serde_json::Value::Number(n) => n.to_string(),
                serde_json::Value::Bool(b) => b.to_string(),
                other => return Err(bad(format!("key `{k}` has unsupported value {other}"))),
            };
            pairs.push((k, value));
        }
    } else {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {} is not `key = value`", n + 1)))?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    if let Some((k, _)) = pairs.iter().find(|(k, _)| k == "config") {
        return Err(bad(format!("key `{k}` cannot be nested")));
    }
    Ok(pairs)
}

fn cmd_train<W: Write>(args: TrainArgs, out: &mut W) -> Result<i32> {
    let config = args.hyper.to_config();
    config.validate()?;
    let corpus = Corpus::load(&args.train, &args.valid, args.test.as_deref())?;
    let mut metrics = args.metrics.as_deref().map(MetricsLog::create).transpose()?;
    writeln!(
        out,
        "vocabulary {} | train tokens {} | valid tokens {} | parameters {}",
        corpus.vocab.len(),
        corpus.train.len(),
        corpus.valid.len(),
        config.model_config(corpus.vocab.len()).parameter_count()
    )
    .ok();

    let mut saved = false;
    let outcome = train(&corpus, &config, |report| {
        let r = report.record;
        writeln!(
            out,
            "epoch {:3} | lr {:.6} | train ppl {:9.3} | valid ppl {:9.3} | {:.1}s",
            r.epoch, r.lr, r.train_ppl, r.valid_ppl, report.seconds
        )
        .ok();
        if let Some(log) = metrics.as_mut() {
            log.append(&MetricsRecord::new(r, report.seconds))?;
        }
        if report.improved {
            let ckpt = Checkpoint::from_model(report.model, &config, &corpus.vocab, report.state);
            save_checkpoint(&args.checkpoint, &ckpt)?;
            saved = true;
        }
        Ok(())
    })?;
    if !saved {
        let ckpt = Checkpoint::from_model(&outcome.best, &config, &corpus.vocab, &outcome.state);
        save_checkpoint(&args.checkpoint, &ckpt)?;
    }
    writeln!(out, "best valid ppl {}", outcome.state.best_valid_ppl).ok();
    if let Some(test) = &corpus.test {
        let ppl = evaluate_perplexity(&outcome.best, test, config.eval_batch_size, config.bptt)?;
        writeln!(out, "test ppl {ppl}").ok();
    }
    Ok(EXIT_OK)
}

fn cmd_eval<W: Write>(args: EvalArgs, out: &mut W) -> Result<i32> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let mut wanted = ckpt.model_config();
    if let Some(c) = args.cell {
        wanted.cell = c;
    }
    if let Some(h) = args.hidden_size {
        wanted.hidden_size = h;
    }
    if let Some(l) = args.num_layers {
        wanted.num_layers = l;
    }
    if let Some(t) = args.tied {
        wanted.tied = t;
    }
    let model = ckpt.model_for(&wanted)?;
    let text = read_lines(&args.data)?;
    let ids = ckpt.vocabulary.encode(text.lines());
    let batch = args.eval_batch_size.unwrap_or(ckpt.config.eval_batch_size);
    let bptt = args.bptt.unwrap_or(ckpt.config.bptt);
    let ppl = evaluate_perplexity(&model, &ids, batch, bptt)?;
    writeln!(out, "ppl {ppl}").ok();
    Ok(EXIT_OK)
}

fn cmd_generate<W: Write>(args: GenerateArgs, out: &mut W) -> Result<i32> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.model()?;
    let mut paragraphs = Vec::with_capacity(args.samples);
    for i in 0..args.samples {
        let mut config = SamplerConfig::new(&ckpt.vocabulary, args.words, args.seed.wrapping_add(i as u64));
        config.temperature = args.temperature;
        let ids = generate(&model, &config)?;
        let tokens: Vec<&str> = ids
            .iter()
            .map(|&id| ckpt.vocabulary.token(id).expect("sampled id is in the vocabulary"))
            .collect();
        paragraphs.push(moses_detokenize(&tokens));
    }
    let mut text = paragraphs.join("\n\n");
    if !text.is_empty() {
        text.push('\n');
    }
    match &args.output {
        Some(path) => fs::write(path, text).map_err(|e| Error::io(path, e))?,
        None => write!(out, "{text}").map_err(|e| Error::io("<stdout>", e))?,
    }
    Ok(EXIT_OK)
}

fn cmd_gradcheck<W: Write, E: Write>(args: GradcheckArgs, out: &mut W, err: &mut E) -> Result<i32> {
    let reports = run_gradient_suite(SuiteOptions {
        cell: args.cell,
        corrupt: args.corrupt,
    })?;
    for r in &reports {
        writeln!(
            out,
            "{:<24} max rel err {:.3e} (< {:.0e}) {}",
            r.name,
            r.max_rel_error,
            r.threshold,
            if r.passed() { "ok" } else { "FAILED" }
        )
        .ok();
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(EXIT_OK)
    } else {
        writeln!(err, "gradient check failed: {}", failed.join(", ")).ok();
        Ok(EXIT_NUMERIC)
    }
}
