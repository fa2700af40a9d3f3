//! Memorizes the bundled toy corpus with the tiny byte-level model.
//!
//! `cargo run --release --example overfit_toy -- [steps] [lr]`

use std::path::Path;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use pldr::dag::DagCoefficients;
use pldr::data::{pack, read_documents, tokenize_documents, TokenizerHandle};
use pldr::model::ModelConfig;
use pldr::train::{evaluate, train_loop, OptimizerConfig, TelemetryConfig, TelemetrySink, TrainConfig, TrainState};

fn main() -> pldr::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse().expect("steps")).unwrap_or(2000);
    let lr: f64 = args.next().map(|s| s.parse().expect("lr")).unwrap_or(3e-3);
    let batch: usize = args.next().map(|s| s.parse().expect("batch")).unwrap_or(4);

    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data/toy.txt");
    let tok = TokenizerHandle::byte_level();
    let tokens = tokenize_documents(&read_documents(&corpus)?, &tok)?;
    let config = ModelConfig::tiny_byte_level();
    let stream = pack(&tokens, config.context_length, batch, tok.pad_id())?;
    println!("{} tokens, {} chunks, {} batches per epoch", tokens.len(), stream.chunks.len(), stream.num_batches());

    let cfg = TrainConfig {
        optimizer: OptimizerConfig::new(lr, steps / 20, steps),
        dag: DagCoefficients::OFF,
        micro_batches: 1,
        epochs: usize::MAX / 2,
        telemetry: TelemetryConfig { log_every: 100, ..TelemetryConfig::default() },
        stop_at: None,
    };
    let mut state = TrainState::<f32>::new(config, 0)?;
    println!("{} parameters", state.model.params().count());
    let report = train_loop(&mut state, &stream, None, &cfg, &TelemetrySink::disabled())?;
    for h in report.history.iter().filter(|h| h.step % 100 == 0) {
        println!("step {:5}  lr {:.2e}  loss {:.4}", h.step, h.lr, h.stats.loss);
    }
    let eval = evaluate(&state.model, &stream, None)?;
    println!(
        "{} steps in {:.1}s; corpus CE {:.4}, accuracy {:.3}",
        state.step,
        report.elapsed.as_secs_f64(),
        eval.loss,
        eval.accuracy
    );
    Ok(())
}
