use pldr::dag::DagCoefficients;
use pldr::data::{pack, PackedStream, TokenBatch, TokenizerHandle};
use pldr::generate::{generate, GenerationParams};
use pldr::model::{Model, ModelConfig};
use pldr::train::{
    compute_gradients, decode_checkpoint, encode_checkpoint, evaluate, train_loop, OptimizerConfig, TelemetryConfig,
    TelemetrySink, TrainConfig, TrainState,
};

const TEXT: &str = "a small lamp burns at the end of the pier and the boats come home by it";

fn byte_model() -> ModelConfig {
    ModelConfig { residual_units: 2, context_length: 16, ..ModelConfig::tiny_byte_level() }
}

fn byte_stream(batch: usize) -> PackedStream {
    let tok = TokenizerHandle::byte_level();
    pack(&tok.encode(TEXT).unwrap(), 17, batch, tok.pad_id()).unwrap()
}

fn train_config(steps: u64, dag: DagCoefficients) -> TrainConfig {
    TrainConfig {
        optimizer: OptimizerConfig::new(3e-3, 3, steps),
        dag,
        micro_batches: 2,
        epochs: 50,
        telemetry: TelemetryConfig { log_every: 4, ..TelemetryConfig::default() },
        stop_at: None,
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn padded_batch_matches_truncated_batch() {
    let model = Model::<f64>::new(byte_model(), 4).unwrap();
    let dag = DagCoefficients::uniform(0.05);
    let a: Vec<u32> = TEXT.bytes().take(9).map(u32::from).collect();
    let b: Vec<u32> = TEXT.bytes().skip(20).take(6).map(u32::from).collect();
    let tight = TokenBatch::from_rows(&[a.clone(), b.clone()], 256).unwrap();
    // same rows with four extra pad columns
    let mut wide = tight.clone();
    wide.cols += 4;
    wide.ids = tight.ids.chunks(tight.cols).flat_map(|r| r.iter().copied().chain([256; 4])).collect();
    for (x, y) in [
        (tight, wide),
        (TokenBatch::from_rows(&[a.clone()], 256).unwrap(), {
            let mut w = a.clone();
            w.extend([256; 5]);
            TokenBatch { pad_start: vec![a.len()], ..TokenBatch::from_rows(&[w], 256).unwrap() }
        }),
    ] {
        let (sx, gx) = compute_gradients(&model, &[x.shifted().unwrap()], &dag, 1).unwrap();
        let (sy, gy) = compute_gradients(&model, &[y.shifted().unwrap()], &dag, 1).unwrap();
        assert!((sx.loss - sy.loss).abs() <= 1e-7, "{} vs {}", sx.loss, sy.loss);
        assert!((sx.dlr - sy.dlr).abs() <= 1e-7);
        assert_eq!(sx.tokens, sy.tokens);
        for (p, q) in gx.iter().zip(&gy) {
            assert!(p.max_abs_diff(q) <= 1e-7, "{:?}: {}", p.shape(), p.max_abs_diff(q));
        }
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut st = TrainState::<f64>::new(byte_model(), 11).unwrap();
        let r = train_loop(
            &mut st,
            &byte_stream(2),
            None,
            &train_config(12, DagCoefficients::uniform(0.01)),
            &TelemetrySink::disabled(),
        )
        .unwrap();
        let text = generate(&st.model, &[104, 101], &GenerationParams::greedy(12)).unwrap();
        (bits(&r.losses()), text, encode_checkpoint(&st).unwrap())
    };
    let (l1, g1, c1) = run();
    let (l2, g2, c2) = run();
    assert_eq!(l1.len(), 12);
    assert_eq!(l1, l2);
    assert_eq!(g1, g2);
    assert_eq!(c1, c2);
}

#[test]
fn resume_continues_the_uninterrupted_run() {
    let stream = byte_stream(2);
    let cfg = train_config(14, DagCoefficients::uniform(0.01));
    let mut full = TrainState::<f64>::new(byte_model(), 2).unwrap();
    let whole = train_loop(&mut full, &stream, None, &cfg, &TelemetrySink::disabled()).unwrap();

    let mut first = TrainState::<f64>::new(byte_model(), 2).unwrap();
    let head = train_loop(
        &mut first,
        &stream,
        None,
        &TrainConfig { stop_at: Some(6), ..cfg.clone() },
        &TelemetrySink::disabled(),
    )
    .unwrap();
    assert_eq!(first.step, 6);
    let bytes = encode_checkpoint(&first).unwrap();
    let mut resumed: TrainState<f64> = decode_checkpoint(&bytes, Some(&byte_model())).unwrap();
    let tail = train_loop(&mut resumed, &stream, None, &cfg, &TelemetrySink::disabled()).unwrap();

    let mut joined = head.losses();
    joined.extend(tail.losses());
    assert_eq!(bits(&joined), bits(&whole.losses()));
    assert_eq!(resumed, full);
}

#[test]
fn evaluation_ignores_batch_size_and_leaves_parameters() {
    let model = Model::<f64>::new(byte_model(), 6).unwrap();
    let before = encode_checkpoint(&TrainState::from_model(model.clone(), 0)).unwrap();
    let one = evaluate(&model, &byte_stream(1), None).unwrap();
    let many = evaluate(&model, &byte_stream(16), None).unwrap();
    assert!((one.loss - many.loss).abs() <= 1e-6);
    assert_eq!(one.tokens, many.tokens);
    assert_eq!(encode_checkpoint(&TrainState::from_model(model, 0)).unwrap(), before);
}
