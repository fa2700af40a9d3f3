//! Trains the tiny byte-level model on the toy corpus with and without the
//! DAG regularizer and prints the DAG losses of the deductive outputs.
//!
//! `cargo run --release --example regularized_training -- [steps] [lambda]`

use std::path::Path;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use pldr::dag::DagCoefficients;
use pldr::data::{pack, read_documents, tokenize_documents, TokenizerHandle};
use pldr::model::ModelConfig;
use pldr::train::{train_loop, OptimizerConfig, TelemetryConfig, TelemetrySink, TrainConfig, TrainState};

fn main() -> pldr::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse().expect("steps")).unwrap_or(300);
    let lambda: f64 = args.next().map(|s| s.parse().expect("lambda")).unwrap_or(0.05);

    let corpus = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data/toy.txt");
    let tok = TokenizerHandle::byte_level();
    let tokens = tokenize_documents(&read_documents(&corpus)?, &tok)?;
    let config = ModelConfig::tiny_byte_level();
    let stream = pack(&tokens, config.context_length, 2, tok.pad_id())?;

    for dag in [DagCoefficients::OFF, DagCoefficients::uniform(lambda)] {
        let cfg = TrainConfig {
            optimizer: OptimizerConfig::new(3e-3, 100, 2000),
            dag,
            micro_batches: 1,
            epochs: 1000,
            telemetry: TelemetryConfig::default(),
            stop_at: Some(steps),
        };
        let mut state = TrainState::<f32>::new(config.clone(), 0)?;
        let report = train_loop(&mut state, &stream, None, &cfg, &TelemetrySink::disabled())?;
        println!("lambda = {:?}", dag.as_array());
        for h in report.history.iter().filter(|h| h.step % 50 == 0 || h.step == 1) {
            let dl = h.stats.dl.map(|v| v.render());
            println!(
                "  step {:4}  ce {:.4}  DL(A_LM) {}  DL(A_P) {}  DL(G_LM) {}",
                h.step, h.stats.ce, dl[0], dl[1], dl[2]
            );
        }
    }
    Ok(())
}
