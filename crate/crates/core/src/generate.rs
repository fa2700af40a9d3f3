//! Autoregressive decoding and the inference-time DAG report.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dag::{dag_loss_stacked, DagCoefficients, DagReport, DagValue, DeductiveKind};
use crate::error::{Error, Result};
use crate::model::{Model, ModelInput};
use crate::scalar::Scalar;

/// Token selection rule. Temperature is fixed at 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampling {
    Greedy,
    TopK { k: usize },
    TopP { p: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub sampling: Sampling,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_new_tokens() -> usize {
    256
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self { sampling: Sampling::TopP { p: 0.8 }, max_new_tokens: default_max_new_tokens(), seed: 0 }
    }
}

impl GenerationParams {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { sampling: Sampling::Greedy, max_new_tokens, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self.sampling {
            Sampling::TopP { p } if !(p > 0.0 && p <= 1.0) => {
                Err(Error::Config(format!("top-p must lie in (0, 1], got {p}")))
            }
            Sampling::TopK { k: 0 } => Err(Error::Config("top-k must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// Softmax of one logit row, computed in 64-bit.
pub fn probabilities<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, x| m.max(x.as_f64()));
    let e: Vec<f64> = logits.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Ids ordered by decreasing probability, ties broken by smaller id.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

/// Smallest prefix of the ranked distribution whose mass reaches `p`.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<usize> {
    let order = ranked(probs);
    let mut mass = 0.0;
    let mut out = Vec::new();
    for i in order {
        out.push(i);
        mass += probs[i];
        if mass >= p {
            break;
        }
    }
    out
}

pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut order = ranked(probs);
    order.truncate(k.max(1));
    order
}

/// Picks the next id from one row of logits.
pub fn sample_next<T: Scalar>(logits: &[T], sampling: Sampling, rng: &mut ChaCha8Rng) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::Input("empty logit row".into()));
    }
    let probs = probabilities(logits);
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Input("non-finite logits".into()));
    }
    let candidates = match sampling {
        Sampling::Greedy => return Ok(ranked(&probs)[0]),
        Sampling::TopK { k } => top_k(&probs, k),
        Sampling::TopP { p } => nucleus(&probs, p),
    };
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    let weights: Vec<f64> = candidates.iter().map(|&i| probs[i]).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Input(format!("cannot sample: {e}")))?;
    Ok(candidates[dist.sample(rng)])
}

/// Continuation ids and why decoding stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<usize>,
    pub hit_end: bool,
}

/// Decodes up to `max_new_tokens` ids after `prompt`, stopping at the end
/// token (which is not included). Every step recomputes the full prefix,
/// truncated to the trailing context window.
pub fn generate<T: Scalar>(model: &Model<T>, prompt: &[usize], params: &GenerationParams) -> Result<Generation> {
    params.validate()?;
    if prompt.is_empty() {
        return Err(Error::Input("prompt must contain at least one token".into()));
    }
    let ctx = model.config().context_length;
    let end = model.config().end_id as usize;
    let vocab = model.config().vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut seq = prompt.to_vec();
    let mut tokens = Vec::new();
    for _ in 0..params.max_new_tokens {
        let window = &seq[seq.len().saturating_sub(ctx)..];
        let out = model.forward(&ModelInput::single(window)?)?;
        let last = &out.logits.data()[(window.len() - 1) * vocab..window.len() * vocab];
        let next = sample_next(last, params.sampling, &mut rng)?;
        if next == end {
            return Ok(Generation { tokens, hit_end: true });
        }
        tokens.push(next);
        seq.push(next);
    }
    Ok(Generation { tokens, hit_end: false })
}

/// Greedily generates `n_gen` ids after `prompt`, runs one forward pass over
/// the whole sequence and reports the DAG loss of each deductive tensor,
/// averaged over layers and heads at the last position.
pub fn dag_inference_report<T: Scalar>(
    model: &Model<T>,
    prompt: &[usize],
    n_gen: usize,
    coefficients: &DagCoefficients,
    model_id: &str,
) -> Result<DagReport> {
    let generated = generate(model, prompt, &GenerationParams::greedy(n_gen))?;
    let mut seq = prompt.to_vec();
    seq.extend(&generated.tokens);
    let window = &seq[seq.len().saturating_sub(model.config().context_length)..];
    let out = model.forward(&ModelInput::single(window)?)?;
    let mut values = [DagValue::Overflow; 3];
    for (slot, kind) in values.iter_mut().zip(DeductiveKind::ALL) {
        let mut sum = 0.0;
        let mut overflow = false;
        let layers = out.deductive.collect(kind);
        for t in &layers {
            let (v, o) = dag_loss_stacked(t)?;
            overflow |= o;
            sum += v.as_f64();
        }
        *slot = DagValue::from_pair(sum / layers.len() as f64, overflow);
    }
    Ok(DagReport::new(model_id, values, coefficients))
}
