use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::dag::{DagCoefficients, DagValue, DeductiveKind};
use crate::data::{PackedStream, ShiftedBatch};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Model, ModelConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::optim::{optimizer_step, AdamState, OptimizerConfig, StepOutcome};
use super::telemetry::{Record, TelemetryConfig, TelemetrySink};

/// Everything the loop needs besides the model and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub dag: DagCoefficients,
    /// Packed batches accumulated into one optimizer step.
    pub micro_batches: usize,
    /// Passes over the training stream; the loop also stops at
    /// `optimizer.total_steps`.
    pub epochs: usize,
    pub telemetry: TelemetryConfig,
    /// Stop once this many updates are applied, leaving the schedule as if
    /// the run went on to `total_steps`.
    pub stop_at: Option<u64>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.dag.validate()?;
        self.telemetry.validate()?;
        if self.micro_batches == 0 || self.epochs == 0 {
            return Err(Error::Config("micro_batches and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Running sums since the last train telemetry line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningWindow {
    pub steps: u64,
    pub loss_sum: f64,
    pub dlr_sum: f64,
    pub correct: u64,
    pub tokens: u64,
}

impl RunningWindow {
    fn push(&mut self, s: &StepStats) {
        self.steps += 1;
        self.loss_sum += s.loss;
        self.dlr_sum += s.dlr;
        self.correct += s.correct;
        self.tokens += s.tokens;
    }

    fn mean_loss(&self) -> f64 {
        self.loss_sum / self.steps.max(1) as f64
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.tokens.max(1) as f64
    }
}

/// Model, optimizer moments and data cursor. Together with the config this
/// is all a resumed run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T> {
    /// Applied optimizer updates so far.
    pub step: u64,
    pub model: Model<T>,
    pub adam: AdamState<T>,
    /// Packed batches taken from the stream (across epochs).
    pub batches_consumed: u64,
    /// Updates skipped because of non-finite gradients.
    pub rejected: u64,
    pub seed: u64,
    pub window: RunningWindow,
}

impl<T: Scalar> TrainState<T> {
    /// Freshly initialized model with zero moments.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::from_model(Model::new(config, seed)?, seed))
    }

    pub fn from_model(model: Model<T>, seed: u64) -> Self {
        let adam = AdamState::zeros_like(model.params());
        Self { step: 0, model, adam, batches_consumed: 0, rejected: 0, seed, window: RunningWindow::default() }
    }
}

/// Loss terms and accuracy counts of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// `ce + dlr`, averaged over micro-batches.
    pub loss: f64,
    pub ce: f64,
    pub dlr: f64,
    /// DL of A_LM, A_P and G_LM, averaged over layers and micro-batches.
    pub dl: [DagValue; 3],
    pub correct: u64,
    pub tokens: u64,
}

/// Per-step record kept in memory by [`train_loop`].
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    pub stats: StepStats,
    pub outcome: StepOutcome,
}

/// Mean masked cross-entropy and accuracy over some batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    pub tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    StepBudget,
    DataExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<StepLog>,
    pub validations: Vec<(u64, EvalResult)>,
    pub stop: StopReason,
    pub elapsed: Duration,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.stats.loss).collect()
    }
}

/// Mean NLL of the kept targets for `logits: [rows, vocab]`.
pub fn lm_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[usize], keep: &[bool]) -> Result<Var> {
    g.cross_entropy(logits, targets, keep)
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, b: &ShiftedBatch) -> u64 {
    let v = logits.last_dim();
    b.keep.iter().enumerate().filter(|(r, &k)| k && argmax(&logits.data()[r * v..(r + 1) * v]) == b.targets[*r]).count()
        as u64
}

fn combine(values: &[DagValue]) -> DagValue {
    let mut sum = 0.0;
    for v in values {
        match v {
            DagValue::Finite(x) => sum += x,
            DagValue::Overflow => return DagValue::Overflow,
        }
    }
    DagValue::Finite(sum / values.len().max(1) as f64)
}

/// Loss, statistics and micro-batch-averaged gradients for one step.
/// `step` is the number the step will carry once applied.
pub fn compute_gradients<T: Scalar>(
    model: &Model<T>,
    batches: &[ShiftedBatch],
    coeffs: &DagCoefficients,
    step: u64,
) -> Result<(StepStats, Vec<Tensor<T>>)> {
    if batches.is_empty() {
        return Err(Error::Contract("a step needs at least one batch".into()));
    }
    let scale = 1.0 / batches.len() as f64;
    let mut grads: Vec<Tensor<T>> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let (mut loss, mut ce_sum, mut dlr_sum) = (0.0, 0.0, 0.0);
    let mut dl_parts: [Vec<DagValue>; 3] = Default::default();
    let (mut correct, mut tokens) = (0u64, 0u64);
    for b in batches {
        let mut g = Graph::new();
        let fv = model.forward_graph(&mut g, &b.input, true)?;
        let ce = lm_cross_entropy(&mut g, fv.logits, &b.targets, &b.keep)?;
        correct += count_correct(g.value(fv.logits), b);
        tokens += b.real_targets() as u64;
        let mut total = ce;
        let mut dlr = 0.0;
        for (k, kind) in DeductiveKind::ALL.into_iter().enumerate() {
            let layers = fv.deductive.len();
            let mut layer_terms = Vec::with_capacity(layers);
            let mut overflow = false;
            for d in &fv.deductive {
                let v = match kind {
                    DeductiveKind::Metric => d.a_lm,
                    DeductiveKind::Potential => d.a_p,
                    DeductiveKind::EnergyCurvature => d.g_lm,
                };
                let (term, o) = g.dag_loss(v)?;
                overflow |= o;
                layer_terms.push(term);
            }
            let mut term = layer_terms[0];
            for &t in &layer_terms[1..] {
                term = g.add(term, t)?;
            }
            let term = g.scale(term, T::from_f64(1.0 / layers as f64));
            let value = DagValue::from_pair(g.value(term).item().as_f64(), overflow);
            dl_parts[k].push(value);
            if let Some(lambda) = coeffs.as_array()[k] {
                if overflow {
                    return Err(Error::RegularizerOverflow { step, tensor: kind.label() });
                }
                dlr += lambda * g.value(term).item().as_f64();
                let weighted = g.scale(term, T::from_f64(lambda));
                total = g.add(total, weighted)?;
            }
        }
        let ce_value = g.value(ce).item().as_f64();
        ce_sum += ce_value;
        dlr_sum += dlr;
        loss += g.value(total).item().as_f64();
        let mut gr = g.backward(total)?;
        for (acc, &p) in grads.iter_mut().zip(&fv.params) {
            let gp = gr.take(p);
            for (a, x) in acc.data_mut().iter_mut().zip(gp.data()) {
                *a = *a + *x * T::from_f64(scale);
            }
        }
    }
    let dl = [combine(&dl_parts[0]), combine(&dl_parts[1]), combine(&dl_parts[2])];
    let stats = StepStats { loss: loss * scale, ce: ce_sum * scale, dlr: dlr_sum * scale, dl, correct, tokens };
    Ok((stats, grads))
}

/// Masked cross-entropy (token-weighted) and accuracy over the first
/// `max_batches` batches of `stream`. Parameters are only read.
pub fn evaluate<T: Scalar>(model: &Model<T>, stream: &PackedStream, max_batches: Option<usize>) -> Result<EvalResult> {
    let mut nll = 0.0f64;
    let (mut correct, mut tokens) = (0u64, 0u64);
    let limit = max_batches.unwrap_or(usize::MAX);
    for batch in stream.batches().take(limit) {
        let b = batch.shifted()?;
        if b.real_targets() == 0 {
            continue;
        }
        let out = model.forward(&b.input)?;
        let v = out.logits.last_dim();
        let logits = out.logits.data();
        for (r, &keep) in b.keep.iter().enumerate() {
            if !keep {
                continue;
            }
            let row = &logits[r * v..(r + 1) * v];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
            let lse = max + row.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln();
            nll += lse - row[b.targets[r]].as_f64();
            if argmax(row) == b.targets[r] {
                correct += 1;
            }
            tokens += 1;
        }
    }
    if tokens == 0 {
        return Err(Error::Input("evaluation corpus has no target tokens".into()));
    }
    Ok(EvalResult { loss: nll / tokens as f64, accuracy: correct as f64 / tokens as f64, tokens })
}

/// Next micro-batches from the stream cursor, skipping batches with no real
/// targets. `None` once the epochs are used up.
fn next_batches(
    state: &mut TrainState<impl Scalar>,
    stream: &PackedStream,
    cfg: &TrainConfig,
) -> Result<Option<Vec<ShiftedBatch>>> {
    let per_epoch = stream.num_batches() as u64;
    let end = per_epoch * cfg.epochs as u64;
    let mut out = Vec::with_capacity(cfg.micro_batches);
    while out.len() < cfg.micro_batches && state.batches_consumed < end {
        let idx = (state.batches_consumed % per_epoch) as usize;
        state.batches_consumed += 1;
        let b = stream.batch(idx).expect("index within stream").shifted()?;
        if b.real_targets() > 0 {
            out.push(b);
        }
    }
    Ok(if out.is_empty() { None } else { Some(out) })
}

/// Trains until `optimizer.total_steps` or the end of the data.
///
/// Each step: forward, loss = CE + DLR, backward, AdamW. Train telemetry is
/// emitted every `log_every` steps (scaled) and validation every
/// `val_every` steps when `validation` is given.
pub fn train_loop<T: Scalar>(
    state: &mut TrainState<T>,
    train: &PackedStream,
    validation: Option<&PackedStream>,
    cfg: &TrainConfig,
    sink: &TelemetrySink,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.context_length > state.model.config().context_length + 1 {
        return Err(Error::Config(format!(
            "packed chunks of {} tokens exceed the model context of {}",
            train.context_length,
            state.model.config().context_length
        )));
    }
    let started = Instant::now();
    let log_every = cfg.telemetry.effective_log_every();
    let val_every = cfg.telemetry.effective_val_every();
    let val_batches = cfg.telemetry.effective_val_batches() as usize;
    let mut history = Vec::new();
    let mut validations = Vec::new();
    let stop = loop {
        if state.step >= cfg.optimizer.total_steps || cfg.stop_at.is_some_and(|s| state.step >= s) {
            break StopReason::StepBudget;
        }
        let Some(batches) = next_batches(state, train, cfg)? else {
            break StopReason::DataExhausted;
        };
        let number = state.step + 1;
        let lr = cfg.optimizer.lr(number);
        let (stats, mut grads) = compute_gradients(&state.model, &batches, &cfg.dag, number)?;
        let outcome =
            optimizer_step(state.model.params_mut(), &mut state.adam, &mut grads, &cfg.optimizer, number, lr)?;
        if outcome == StepOutcome::Rejected {
            state.rejected += 1;
            log::warn!("step {number}: non-finite gradient, update skipped");
            history.push(StepLog { step: number, lr, stats, outcome });
            continue;
        }
        state.step = number;
        state.window.push(&stats);
        if state.step % log_every == 0 {
            sink.send(&Record::Train {
                step: state.step,
                lr,
                train_loss: state.window.mean_loss(),
                train_acc: state.window.accuracy(),
                dl: stats.dl,
                dlr: state.window.dlr_sum / state.window.steps.max(1) as f64,
                rejected_steps: state.rejected,
            });
            state.window = RunningWindow::default();
        }
        if let Some(val) = validation {
            if state.step % val_every == 0 {
                let r = evaluate(&state.model, val, Some(val_batches))?;
                sink.send(&Record::Validation {
                    step: state.step,
                    val_loss: r.loss,
                    val_acc: r.accuracy,
                    tokens: r.tokens,
                });
                validations.push((state.step, r));
            }
        }
        history.push(StepLog { step: number, lr, stats, outcome });
    };
    Ok(TrainReport { history, validations, stop, elapsed: started.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{pack, TokenBatch};

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            residual_units: 1,
            context_length: 8,
            pad_id: 0,
            end_id: 1,
            ..ModelConfig::v5(1, 2, 8)
        }
    }

    fn config(steps: u64, dag: DagCoefficients) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerConfig::new(5e-3, 2, steps),
            dag,
            micro_batches: 1,
            epochs: 100,
            telemetry: TelemetryConfig { log_every: 1, ..TelemetryConfig::default() },
            stop_at: None,
        }
    }

    fn stream() -> PackedStream {
        let toks: Vec<u32> = (0..40).map(|i| 2 + (i * 7 % 11) as u32).collect();
        pack(&toks, 9, 2, 0).unwrap()
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::zeros(&[3, 32000]));
        let ce = lm_cross_entropy(&mut g, logits, &[1, 2, 3], &[true, true, true]).unwrap();
        assert!((g.value(ce).item() - 32000f64.ln()).abs() < 1e-12);
        assert!((32000f64.ln() - 10.373).abs() < 1e-3);
        let peaked = g.constant(Tensor::from_fn(&[2, 4], |i| if i == 1 || i == 6 { 1e6 } else { 0.0 }));
        let ce = lm_cross_entropy(&mut g, peaked, &[1, 2], &[true, true]).unwrap();
        assert!(g.value(ce).item().abs() < 1e-12);
        assert!(matches!(lm_cross_entropy(&mut g, peaked, &[1, 2], &[false, false]), Err(Error::Contract(_))));
    }

    #[test]
    fn off_coefficients_add_nothing() {
        let m = Model::<f64>::new(tiny(), 0).unwrap();
        let b = TokenBatch::from_rows(&[vec![2, 3, 4, 5]], 0).unwrap().shifted().unwrap();
        let (s, _) = compute_gradients(&m, &[b], &DagCoefficients::OFF, 1).unwrap();
        assert_eq!(s.dlr, 0.0);
        assert_eq!(s.loss, s.ce);
    }

    #[test]
    fn loop_stops_at_budget_and_logs() {
        let mut st = TrainState::<f64>::new(tiny(), 1).unwrap();
        let r = train_loop(
            &mut st,
            &stream(),
            Some(&stream()),
            &config(6, DagCoefficients::OFF),
            &TelemetrySink::disabled(),
        )
        .unwrap();
        assert_eq!(r.stop, StopReason::StepBudget);
        assert_eq!(st.step, 6);
        assert_eq!(r.history.len(), 6);
        assert!(r.losses().iter().all(|l| l.is_finite()));
    }

    #[test]
    fn loop_ends_cleanly_when_data_runs_out() {
        let mut st = TrainState::<f64>::new(tiny(), 1).unwrap();
        let cfg = TrainConfig { epochs: 1, ..config(1000, DagCoefficients::OFF) };
        let r = train_loop(&mut st, &stream(), None, &cfg, &TelemetrySink::disabled()).unwrap();
        assert_eq!(r.stop, StopReason::DataExhausted);
        assert_eq!(st.step as usize, stream().num_batches());
    }

    #[test]
    fn eval_leaves_parameters_alone() {
        let m = Model::<f64>::new(tiny(), 3).unwrap();
        let before = m.params().fingerprint();
        let r = evaluate(&m, &stream(), None).unwrap();
        assert_eq!(m.params().fingerprint(), before);
        assert!(r.loss > 0.0 && (0.0..=1.0).contains(&r.accuracy));
    }
}
