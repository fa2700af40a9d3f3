//! Command-line front end: `pretrain`, `generate`, `dag-inspect`, `eval-loss`.
//!
//! Settings come from a run config file; flags given on the command line
//! replace the matching config keys. Telemetry goes to
//! `$PLDR_TELEMETRY_DIR/<model_id>.jsonl` (default directory `telemetry`).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::dag::DagCoefficients;
use crate::data::{pack, read_documents, tokenize_documents, PackedStream, TokenizerHandle, BYTE_VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::generate::{dag_inference_report, generate, GenerationParams, Sampling};
use crate::model::ModelConfig;
use crate::scalar::{Precision, Scalar};
use crate::train::{
    evaluate, load_checkpoint, read_checkpoint_info, save_checkpoint, train_loop, Record, StopReason, TelemetrySink,
    TrainState,
};

pub const TELEMETRY_ENV: &str = "PLDR_TELEMETRY_DIR";

#[derive(Debug, Parser)]
#[command(name = "pldr", version, about = "Train and inspect power-law graph attention language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a run config, optionally resuming a checkpoint.
    Pretrain(PretrainArgs),
    /// Continue a prompt with a trained checkpoint.
    Generate(GenerateArgs),
    /// Greedy generation followed by a DAG loss report of the deductive outputs.
    DagInspect(InspectArgs),
    /// Mean cross-entropy and accuracy of a checkpoint on a corpus.
    EvalLoss(EvalArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Final checkpoint path (default `<model_id>.pldr`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long, conflicts_with = "top_k")]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub max_new_tokens: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Supplies the tokenizer and generation defaults; without it the
    /// byte-level tokenizer is assumed.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tokens generated before the report pass.
    #[arg(long, default_value_t = 50)]
    pub max_new_tokens: usize,
    /// CSV report path (default `<model_id>-dag.csv`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus to score (default: the config's validation corpus).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

/// Parses `std::env::args`, runs the command and maps errors to exit codes:
/// 2 for bad configs, inputs and missing files, 1 otherwise.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Tokenizer(_) => 2,
        Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(&a, out),
        Command::Generate(a) => cmd_generate(&a, out),
        Command::DagInspect(a) => cmd_dag_inspect(&a, out),
        Command::EvalLoss(a) => cmd_eval_loss(&a, out),
    }
}

fn telemetry_path(model_id: &str) -> PathBuf {
    let dir = std::env::var_os(TELEMETRY_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("telemetry"));
    dir.join(format!("{model_id}.jsonl"))
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found: {}", path.display())))
    }
}

fn load_stream(path: &Path, tok: &TokenizerHandle, model: &ModelConfig, batch_size: usize) -> Result<PackedStream> {
    require_file(path, "corpus")?;
    let tokens = tokenize_documents(&read_documents(path)?, tok)?;
    // one extra token per chunk so inputs fill the whole context
    pack(&tokens, model.context_length + 1, batch_size, tok.pad_id())
}

fn tokenizer_for(config: Option<&RunConfig>, model: &ModelConfig) -> Result<TokenizerHandle> {
    let tok = match config {
        Some(c) => TokenizerHandle::from_config(&c.data.tokenizer)?,
        None if model.vocab_size == BYTE_VOCAB_SIZE => TokenizerHandle::byte_level(),
        None => {
            return Err(Error::Config(format!(
                "checkpoint has a {}-entry vocabulary; pass --config to name its tokenizer",
                model.vocab_size
            )))
        }
    };
    if tok.vocab_size() != model.vocab_size || tok.pad_id() != model.pad_id || tok.end_id() != model.end_id {
        return Err(Error::Config(format!(
            "tokenizer (vocab {}, pad {}, end {}) does not match the model (vocab {}, pad {}, end {})",
            tok.vocab_size(),
            tok.pad_id(),
            tok.end_id(),
            model.vocab_size,
            model.pad_id,
            model.end_id
        )));
    }
    Ok(tok)
}

fn load_config(path: Option<&Path>) -> Result<Option<RunConfig>> {
    path.map(RunConfig::load).transpose()
}

fn model_id_for(config: Option<&RunConfig>, checkpoint: &Path) -> String {
    match config {
        Some(c) => c.model_id.clone(),
        None => checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into()),
    }
}

pub fn cmd_pretrain(a: &PretrainArgs, out: &mut dyn Write) -> Result<()> {
    let mut config = RunConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    match config.precision {
        Precision::F32 => pretrain::<f32>(&config, a, out),
        Precision::F64 => pretrain::<f64>(&config, a, out),
    }
}

fn pretrain<T: Scalar>(config: &RunConfig, a: &PretrainArgs, out: &mut dyn Write) -> Result<()> {
    require_file(&config.data.train, "corpus")?;
    if let Some(p) = &config.data.validation {
        require_file(p, "corpus")?;
    }
    let tok = tokenizer_for(Some(config), &config.model)?;
    let train = load_stream(&config.data.train, &tok, &config.model, config.data.batch_size)?;
    let validation = match &config.data.validation {
        Some(p) => Some(load_stream(p, &tok, &config.model, config.data.batch_size)?),
        None => None,
    };
    let mut state = match &a.checkpoint {
        Some(p) => {
            require_file(p, "checkpoint")?;
            load_checkpoint::<T>(p, Some(&config.model))?
        }
        None => TrainState::new(config.model.clone(), config.seed)?,
    };
    let tpath = telemetry_path(&config.model_id);
    let sink = TelemetrySink::to_file(&tpath)?;
    writeln!(
        out,
        "{}: {} parameters, {} train batches, resuming at step {}",
        config.model_id,
        state.model.params().count(),
        train.num_batches(),
        state.step
    )?;
    let report = train_loop(&mut state, &train, validation.as_ref(), &config.train_config(), &sink)?;
    sink.finish()?;
    let ckpt = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("{}.pldr", config.model_id)));
    save_checkpoint(&state, &ckpt)?;

    let stop = match report.stop {
        StopReason::StepBudget => "step budget reached",
        StopReason::DataExhausted => "data exhausted",
    };
    writeln!(out, "stopped after step {} ({stop}), {} rejected", state.step, state.rejected)?;
    if let Some(last) = report.history.last() {
        let s = &last.stats;
        writeln!(
            out,
            "final loss {:.4} (CE {:.4}, DLR {:.4e}), accuracy {:.4}",
            s.loss,
            s.ce,
            s.dlr,
            s.correct as f64 / s.tokens.max(1) as f64
        )?;
        writeln!(
            out,
            "DL(A_LM) = {}, DL(A_P) = {}, DL(G_LM) = {}",
            s.dl[0].render(),
            s.dl[1].render(),
            s.dl[2].render()
        )?;
    }
    if let Some((step, v)) = report.validations.last() {
        writeln!(out, "validation at step {step}: loss {:.4}, accuracy {:.4}", v.loss, v.accuracy)?;
    }
    writeln!(out, "wall time {:.1}s", report.elapsed.as_secs_f64())?;
    writeln!(out, "checkpoint {}", ckpt.display())?;
    writeln!(out, "telemetry {}", tpath.display())?;
    Ok(())
}

fn generation_params(config: Option<&RunConfig>, s: &SamplingArgs) -> Result<GenerationParams> {
    let mut p = config.map(|c| c.generation.clone()).unwrap_or_default();
    if let Some(k) = s.top_k {
        p.sampling = if k == 1 { Sampling::Greedy } else { Sampling::TopK { k } };
    }
    if let Some(top_p) = s.top_p {
        p.sampling = Sampling::TopP { p: top_p };
    }
    if let Some(n) = s.max_new_tokens {
        p.max_new_tokens = n;
    }
    if let Some(seed) = s.seed {
        p.seed = seed;
    }
    p.validate()?;
    Ok(p)
}

pub fn cmd_generate(a: &GenerateArgs, out: &mut dyn Write) -> Result<()> {
    let config = load_config(a.config.as_deref())?;
    let params = generation_params(config.as_ref(), &a.sampling)?;
    require_file(&a.checkpoint, "checkpoint")?;
    match read_checkpoint_info(&a.checkpoint)?.precision {
        Precision::F32 => generate_typed::<f32>(a, config.as_ref(), &params, out),
        Precision::F64 => generate_typed::<f64>(a, config.as_ref(), &params, out),
    }
}

fn encode_prompt(tok: &TokenizerHandle, prompt: &str) -> Result<Vec<usize>> {
    let ids = tok.encode_plain(prompt)?;
    if ids.is_empty() {
        return Err(Error::Input("prompt is empty".into()));
    }
    Ok(ids.into_iter().map(|i| i as usize).collect())
}

fn generate_typed<T: Scalar>(
    a: &GenerateArgs,
    config: Option<&RunConfig>,
    params: &GenerationParams,
    out: &mut dyn Write,
) -> Result<()> {
    let state = load_checkpoint::<T>(&a.checkpoint, config.map(|c| &c.model))?;
    let tok = tokenizer_for(config, state.model.config())?;
    let prompt = encode_prompt(&tok, &a.prompt)?;
    let g = generate(&state.model, &prompt, params)?;
    let ids: Vec<u32> = g.tokens.iter().map(|&i| i as u32).collect();
    writeln!(out, "{}", tok.decode(&ids)?)?;
    Ok(())
}

pub fn cmd_dag_inspect(a: &InspectArgs, out: &mut dyn Write) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    let config = load_config(a.config.as_deref())?;
    match read_checkpoint_info(&a.checkpoint)?.precision {
        Precision::F32 => inspect_typed::<f32>(a, config.as_ref(), out),
        Precision::F64 => inspect_typed::<f64>(a, config.as_ref(), out),
    }
}

fn inspect_typed<T: Scalar>(a: &InspectArgs, config: Option<&RunConfig>, out: &mut dyn Write) -> Result<()> {
    let state = load_checkpoint::<T>(&a.checkpoint, config.map(|c| &c.model))?;
    let tok = tokenizer_for(config, state.model.config())?;
    let prompt = encode_prompt(&tok, &a.prompt)?;
    let model_id = model_id_for(config, &a.checkpoint);
    let coefficients = config.map(|c| c.dag).unwrap_or(DagCoefficients::OFF);
    let report = dag_inference_report(&state.model, &prompt, a.max_new_tokens, &coefficients, &model_id)?;
    let path = a.out.clone().unwrap_or_else(|| PathBuf::from(format!("{model_id}-dag.csv")));
    report.write_csv(std::fs::File::create(&path)?)?;
    writeln!(out, "{}", report.table_row())?;
    writeln!(out, "report {}", path.display())?;
    Ok(())
}

pub fn cmd_eval_loss(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    require_file(&a.checkpoint, "checkpoint")?;
    let config = load_config(a.config.as_deref())?;
    match read_checkpoint_info(&a.checkpoint)?.precision {
        Precision::F32 => eval_typed::<f32>(a, config.as_ref(), out),
        Precision::F64 => eval_typed::<f64>(a, config.as_ref(), out),
    }
}

fn eval_typed<T: Scalar>(a: &EvalArgs, config: Option<&RunConfig>, out: &mut dyn Write) -> Result<()> {
    let state = load_checkpoint::<T>(&a.checkpoint, config.map(|c| &c.model))?;
    let model = state.model.config();
    let tok = tokenizer_for(config, model)?;
    let corpus = a
        .corpus
        .clone()
        .or_else(|| config.and_then(|c| c.data.validation.clone()))
        .ok_or_else(|| Error::Config("no corpus: pass --corpus or set data.validation".into()))?;
    let batch_size = a.batch_size.or(config.map(|c| c.data.batch_size)).unwrap_or(16);
    let stream = load_stream(&corpus, &tok, model, batch_size)?;
    let r = evaluate(&state.model, &stream, None)?;
    let model_id = model_id_for(config, &a.checkpoint);
    writeln!(out, "{model_id}: loss {:.6} accuracy {:.4} over {} tokens", r.loss, r.accuracy, r.tokens)?;
    let sink = TelemetrySink::to_file(&telemetry_path(&model_id))?;
    sink.send(&Record::Eval {
        corpus: corpus.display().to_string(),
        loss: r.loss,
        accuracy: r.accuracy,
        tokens: r.tokens,
    });
    sink.finish()
}
