//! Trains the tiny byte-level model on the toy corpus for a few hundred
//! steps, then continues a prompt with greedy, top-k and top-p decoding and
//! prints the DAG report of the generated sequence.
//!
//! `cargo run --release --example generate -- [steps] [prompt]`

use std::path::Path;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use pldr::dag::DagCoefficients;
use pldr::data::{pack, read_documents, tokenize_documents, TokenizerHandle};
use pldr::generate::{dag_inference_report, generate, GenerationParams, Sampling};
use pldr::model::ModelConfig;
use pldr::train::{train_loop, OptimizerConfig, TelemetryConfig, TelemetrySink, TrainConfig, TrainState};

fn main() -> pldr::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse().expect("steps")).unwrap_or(1000);
    let prompt = args.next().unwrap_or_else(|| "The ".into());

    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data/toy.txt");
    let tok = TokenizerHandle::byte_level();
    let tokens = tokenize_documents(&read_documents(&corpus)?, &tok)?;
    let config = ModelConfig::tiny_byte_level();
    let stream = pack(&tokens, config.context_length + 1, 2, tok.pad_id())?;

    let mut state = TrainState::<f32>::new(config, 0)?;
    let cfg = TrainConfig {
        optimizer: OptimizerConfig::new(3e-3, (steps / 10).max(1), steps),
        dag: DagCoefficients::OFF,
        micro_batches: 1,
        epochs: 10_000,
        telemetry: TelemetryConfig::default(),
        stop_at: None,
    };
    let report = train_loop(&mut state, &stream, None, &cfg, &TelemetrySink::disabled())?;
    println!("trained {} steps, final loss {:.3}", state.step, report.losses().last().copied().unwrap_or(f64::NAN));

    let ids: Vec<usize> = tok.encode_plain(&prompt)?.into_iter().map(|i| i as usize).collect();
    for sampling in [Sampling::Greedy, Sampling::TopK { k: 5 }, Sampling::TopP { p: 0.8 }] {
        let params = GenerationParams { sampling, max_new_tokens: 120, seed: 3 };
        let out = generate(&state.model, &ids, &params)?;
        let text: Vec<u32> = out.tokens.iter().map(|&t| t as u32).collect();
        println!("\n[{sampling:?}]\n{prompt}{}", tok.decode(&text)?);
    }

    let report = dag_inference_report(&state.model, &ids, 50, &DagCoefficients::OFF, "toy")?;
    println!("\n{}", report.table_row());
    Ok(())
}
