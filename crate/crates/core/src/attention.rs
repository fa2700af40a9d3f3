//! Power-law graph attention.
//!
//! Each head learns a nonnegative metric tensor `A_LM` over its `d_k`
//! embedding dimensions with a residual SwiGLU network, raises it elementwise
//! to learned power coefficients `P` to get the potential `A_P`, mixes the
//! potential columns into the energy-curvature tensor `G_LM`, and scores
//! queries against keys after projecting both onto `G_LM`.
//!
//! The metric at position `s` is built from the queries at positions `0..=s`
//! only, so every output position sees the graph of its own prefix and the
//! block is causal end to end. The deductive outputs reported for a sequence
//! are the ones at its last position, i.e. the graph of the whole sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::{causal_mask, Broadcast, LAYER_NORM_EPS, POWER_FLOOR};
use crate::params::{Init, ParamRegistry};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Metric-learner variant. `V9` resizes the residual stream with learned
/// projections before and after the residual units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    V5,
    V9,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_k: usize,
    pub flavor: Flavor,
    pub residual_units: usize,
    pub metric_gated_size: usize,
    pub metric_linear_size: usize,
    pub rope_base: f64,
}

impl AttentionConfig {
    /// v5 sizing: `floor(2/3 · 4 · d_k) : d_k`.
    pub fn v5(n_heads: usize, d_k: usize) -> Self {
        Self {
            d_model: n_heads * d_k,
            n_heads,
            d_k,
            flavor: Flavor::V5,
            residual_units: 8,
            metric_gated_size: 8 * d_k / 3,
            metric_linear_size: d_k,
            rope_base: 10_000.0,
        }
    }

    /// v9 sizing with an explicit residual width.
    pub fn v9(n_heads: usize, d_k: usize, gated: usize, linear: usize) -> Self {
        Self { flavor: Flavor::V9, metric_gated_size: gated, metric_linear_size: linear, ..Self::v5(n_heads, d_k) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_k == 0 || self.d_model != self.n_heads * self.d_k {
            return Err(Error::Config(format!(
                "d_model ({}) must equal n_heads ({}) * d_k ({})",
                self.d_model, self.n_heads, self.d_k
            )));
        }
        if self.d_k % 2 != 0 {
            return Err(Error::Config(format!("d_k must be even for rotary embeddings, got {}", self.d_k)));
        }
        if self.flavor == Flavor::V5 && self.metric_linear_size != self.d_k {
            return Err(Error::Config(format!(
                "v5 metric learner needs metric_linear_size == d_k ({} != {})",
                self.metric_linear_size, self.d_k
            )));
        }
        if self.metric_gated_size == 0 || self.metric_linear_size == 0 {
            return Err(Error::Config("metric learner sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Gated feed-forward `(silu(x·W_gate) ⊙ (x·W_value)) · W_out` without biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwiGluWeights<H = Var> {
    pub gate: H,
    pub value: H,
    pub out: H,
}

impl SwiGluWeights<usize> {
    pub fn register(reg: &mut ParamRegistry, prefix: &str, d_in: usize, gated: usize, d_out: usize, std: f64) -> Self {
        Self {
            gate: reg.add(format!("{prefix}.gate"), &[d_in, gated], Init::Normal(std), true),
            value: reg.add(format!("{prefix}.value"), &[d_in, gated], Init::Normal(std), true),
            out: reg.add(format!("{prefix}.out"), &[gated, d_out], Init::Normal(std), true),
        }
    }

    pub fn bind(&self, vars: &[Var]) -> SwiGluWeights<Var> {
        SwiGluWeights { gate: vars[self.gate], value: vars[self.value], out: vars[self.out] }
    }
}

/// Scalar count of one SwiGLU network.
pub fn swiglu_param_count(d_in: usize, gated: usize, d_out: usize) -> usize {
    2 * d_in * gated + gated * d_out
}

pub fn swiglu_ffn<T: Scalar>(g: &mut Graph<T>, x: Var, w: &SwiGluWeights) -> Result<Var> {
    let gate = g.linear(x, w.gate)?;
    let value = g.linear(x, w.value)?;
    let h = g.swish_mul(gate, value)?;
    g.linear(h, w.out)
}

/// Weights of the metric learner, shared by every head of a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricLearnerWeights<H = Var> {
    pub w_a: H,
    pub norm_gain: H,
    pub norm_bias: H,
    pub pre: Option<H>,
    pub post: Option<H>,
    pub units: Vec<[SwiGluWeights<H>; 2]>,
}

impl MetricLearnerWeights<usize> {
    pub fn register(reg: &mut ParamRegistry, prefix: &str, cfg: &AttentionConfig, std: f64) -> Self {
        let d = cfg.d_k;
        let m = cfg.metric_linear_size;
        let w_a = reg.add(format!("{prefix}.w_a"), &[d, d], Init::Normal(std), true);
        let norm_gain = reg.add(format!("{prefix}.norm.gain"), &[d], Init::Ones, false);
        let norm_bias = reg.add(format!("{prefix}.norm.bias"), &[d], Init::Zeros, false);
        let (pre, post) = match cfg.flavor {
            Flavor::V5 => (None, None),
            Flavor::V9 => (
                Some(reg.add(format!("{prefix}.pre"), &[d, m], Init::Normal((d as f64).powf(-0.5)), true)),
                Some(reg.add(format!("{prefix}.post"), &[m, d], Init::Normal((m as f64).powf(-0.5)), true)),
            ),
        };
        let units = (0..cfg.residual_units)
            .map(|u| {
                let mut f = |i| {
                    SwiGluWeights::register(reg, &format!("{prefix}.unit{u}.ffn{i}"), m, cfg.metric_gated_size, m, std)
                };
                [f(0), f(1)]
            })
            .collect();
        Self { w_a, norm_gain, norm_bias, pre, post, units }
    }

    pub fn bind(&self, vars: &[Var]) -> MetricLearnerWeights<Var> {
        MetricLearnerWeights {
            w_a: vars[self.w_a],
            norm_gain: vars[self.norm_gain],
            norm_bias: vars[self.norm_bias],
            pre: self.pre.map(|i| vars[i]),
            post: self.post.map(|i| vars[i]),
            units: self.units.iter().map(|[a, b]| [a.bind(vars), b.bind(vars)]).collect(),
        }
    }
}

/// Residual metric network applied to every prefix of `q: [N, T, d_k]`.
///
/// Position `t` receives `layer_norm_rows((Q_{≤t}·W_a)ᵀ · Q_{≤t} / (t + 1))`,
/// runs through the residual units (with the v9 projections around them) and
/// ends in iSwiGLU, so the result `[N, T, d_k, d_k]` is entrywise nonnegative.
pub fn metric_learner<T: Scalar>(g: &mut Graph<T>, q: Var, w: &MetricLearnerWeights) -> Result<Var> {
    let qa = g.linear(q, w.w_a)?;
    let gram = g.prefix_gram(qa, q)?;
    let mut x = g.layer_norm(gram, w.norm_gain, w.norm_bias, T::from_f64(LAYER_NORM_EPS))?;
    if let Some(pre) = w.pre {
        x = g.linear(x, pre)?;
    }
    for [f1, f2] in &w.units {
        let h = swiglu_ffn(g, x, f1)?;
        let h = swiglu_ffn(g, h, f2)?;
        x = g.add(x, h)?;
    }
    if let Some(post) = w.post {
        x = g.linear(x, post)?;
    }
    Ok(g.iswiglu(x))
}

/// `G_LM = A_P · W_G + b_G` for `a_p: [B, h, T, d, d]` with per-head
/// `w_g: [h, d, d]` and `b_g: [h, d]`.
pub fn energy_curvature<T: Scalar>(
    g: &mut Graph<T>,
    a_p: Var,
    w_g: Var,
    b_g: Var,
    n_heads: usize,
    seq: usize,
) -> Result<Var> {
    let mixed = g.batch_matmul(a_p, w_g, false, false, Broadcast { block: 1, repeat: seq, groups: n_heads })?;
    let d = g.value(b_g).last_dim();
    g.add_broadcast(mixed, b_g, Broadcast { block: d, repeat: seq * d, groups: n_heads })
}

/// Per-layer attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<H = Var> {
    pub wq: H,
    pub wk: H,
    pub wv: H,
    pub wo: H,
    pub metric: MetricLearnerWeights<H>,
    /// Power coefficients `[h, d_k, d_k]`.
    pub p: H,
    /// Potential mixing `[h, d_k, d_k]`.
    pub w_g: H,
    /// `[h, d_k]`.
    pub b_g: H,
}

impl AttentionWeights<usize> {
    pub fn register(reg: &mut ParamRegistry, prefix: &str, cfg: &AttentionConfig, std: f64) -> Self {
        let (dm, h, d) = (cfg.d_model, cfg.n_heads, cfg.d_k);
        let mut proj = |n: &str| reg.add(format!("{prefix}.{n}"), &[dm, dm], Init::Normal(std), true);
        let (wq, wk, wv, wo) = (proj("wq"), proj("wk"), proj("wv"), proj("wo"));
        let metric = MetricLearnerWeights::register(reg, &format!("{prefix}.metric"), cfg, std);
        Self {
            wq,
            wk,
            wv,
            wo,
            metric,
            p: reg.add(format!("{prefix}.power"), &[h, d, d], Init::Ones, false),
            w_g: reg.add(format!("{prefix}.w_g"), &[h, d, d], Init::Identity, true),
            b_g: reg.add(format!("{prefix}.b_g"), &[h, d], Init::Zeros, false),
        }
    }

    pub fn bind(&self, vars: &[Var]) -> AttentionWeights<Var> {
        AttentionWeights {
            wq: vars[self.wq],
            wk: vars[self.wk],
            wv: vars[self.wv],
            wo: vars[self.wo],
            metric: self.metric.bind(vars),
            p: vars[self.p],
            w_g: vars[self.w_g],
            b_g: vars[self.b_g],
        }
    }
}

/// Tape handles of one layer's deductive outputs, each `[B, h, d_k, d_k]`.
#[derive(Debug, Clone, Copy)]
pub struct DeductiveVars {
    pub a_lm: Var,
    pub a_p: Var,
    pub g_lm: Var,
    pub p: Var,
}

/// Deductive outputs of one layer, read at `ModelInput::last` of each sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDeductive<T> {
    /// `[B, h, d_k, d_k]`, entrywise ≥ 0.
    pub a_lm: Tensor<T>,
    /// `[B, h, d_k, d_k]`, equal to `A_LM^⊙P`.
    pub a_p: Tensor<T>,
    /// `[B, h, d_k, d_k]`.
    pub g_lm: Tensor<T>,
    /// Input-independent power coefficients `[h, d_k, d_k]`.
    pub p: Tensor<T>,
}

/// Deductive outputs of every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DeductiveOutputs<T> {
    pub layers: Vec<LayerDeductive<T>>,
}

impl<T: Scalar> DeductiveOutputs<T> {
    pub fn from_vars(g: &Graph<T>, vars: &[DeductiveVars]) -> Self {
        Self {
            layers: vars
                .iter()
                .map(|v| LayerDeductive {
                    a_lm: g.value(v.a_lm).clone(),
                    a_p: g.value(v.a_p).clone(),
                    g_lm: g.value(v.g_lm).clone(),
                    p: g.value(v.p).clone(),
                })
                .collect(),
        }
    }

    /// All layers' tensors of one kind.
    pub fn collect(&self, kind: crate::dag::DeductiveKind) -> Vec<&Tensor<T>> {
        use crate::dag::DeductiveKind::*;
        self.layers
            .iter()
            .map(|l| match kind {
                Metric => &l.a_lm,
                Potential => &l.a_p,
                EnergyCurvature => &l.g_lm,
            })
            .collect()
    }
}

/// Shape bookkeeping for one attention call.
#[derive(Debug, Clone, Copy)]
pub struct SeqShape<'a> {
    pub batch: usize,
    pub seq: usize,
    /// Position of each sample whose deductive outputs are read.
    pub last: &'a [usize],
}

/// Multi-head power-law graph attention over `x: [B·T, d_model]`.
///
/// Returns the projected output `[B·T, d_model]` and the layer's deductive
/// outputs at `last` of each sample.
pub fn plga_mha<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &AttentionConfig,
    w: &AttentionWeights,
    x: Var,
    shape: SeqShape<'_>,
) -> Result<(Var, DeductiveVars)> {
    let SeqShape { batch, seq, last } = shape;
    let (h, d) = (cfg.n_heads, cfg.d_k);
    let bh = batch * h;
    let split = |g: &mut Graph<T>, v: Var| -> Result<Var> {
        let p = g.permute_0213(v, [batch, seq, h, d])?;
        g.reshape(p, &[bh, seq, d])
    };
    let q = g.linear(x, w.wq)?;
    let k = g.linear(x, w.wk)?;
    let v = g.linear(x, w.wv)?;
    let (q, k, v) = (split(g, q)?, split(g, k)?, split(g, v)?);

    // deductive chain, one graph per (sample, head, position)
    let a_lm = metric_learner(g, q, &w.metric)?;
    let a_p = g.power(a_lm, w.p, Broadcast { block: d * d, repeat: seq, groups: h }, T::from_f64(POWER_FLOOR))?;
    let g_lm = energy_curvature(g, a_p, w.w_g, w.b_g, h, seq)?;

    // scores (q_s G_s)·(k_t G_s) = q_s (G_s G_sᵀ) k_tᵀ
    let positions: Vec<usize> = (0..seq).collect();
    let qr = g.rotary(q, &positions, cfg.rope_base)?;
    let kr = g.rotary(k, &positions, cfg.rope_base)?;
    let metric = g.batch_matmul(g_lm, g_lm, false, true, Broadcast::same(bh * seq))?;
    let q_rows = g.reshape(qr, &[bh * seq, 1, d])?;
    let projected = g.batch_matmul(q_rows, metric, false, false, Broadcast::same(bh * seq))?;
    let projected = g.reshape(projected, &[bh, seq, d])?;
    let scores = g.batch_matmul(projected, kr, false, true, Broadcast::same(bh))?;
    let scores = g.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()));
    let mask = causal_mask(seq);
    let attn = g.masked_softmax(scores, Some(&mask))?;
    let heads = g.batch_matmul(attn, v, false, false, Broadcast::same(bh))?;
    let merged = g.permute_0213(heads, [batch, h, seq, d])?;
    let merged = g.reshape(merged, &[batch * seq, cfg.d_model])?;
    let y = g.linear(merged, w.wo)?;

    let idx: Vec<usize> = (0..bh).map(|i| i * seq + last[i / h]).collect();
    let out_shape = [batch, h, d, d];
    let deductive = DeductiveVars {
        a_lm: g.gather_blocks(a_lm, d * d, &idx, &out_shape)?,
        a_p: g.gather_blocks(a_p, d * d, &idx, &out_shape)?,
        g_lm: g.gather_blocks(g_lm, d * d, &idx, &out_shape)?,
        p: w.p,
    };
    Ok((y, deductive))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn tiny_cfg() -> AttentionConfig {
        AttentionConfig { residual_units: 2, ..AttentionConfig::v5(2, 4) }
    }

    #[test]
    fn v5_sizes_follow_d_k() {
        let c = AttentionConfig::v5(14, 64);
        assert_eq!((c.metric_gated_size, c.metric_linear_size), (170, 64));
        assert_eq!(c.d_model, 896);
        c.validate().unwrap();
        let bad = AttentionConfig { metric_linear_size: 112, ..c };
        assert!(bad.validate().is_err());
        assert!(AttentionConfig::v9(15, 64, 300, 112).validate().is_ok());
    }

    #[test]
    fn swiglu_examples() {
        assert_eq!(swiglu_param_count(64, 170, 64), 32_640);
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(&[1, 1]));
        let w = SwiGluWeights {
            gate: g.constant(Tensor::ones(&[1, 1])),
            value: g.constant(Tensor::ones(&[1, 1])),
            out: g.constant(Tensor::ones(&[1, 1])),
        };
        let y = swiglu_ffn(&mut g, x, &w).unwrap();
        assert!((g.value(y).item() - 0.731_058_578_630_004_9).abs() < 1e-12);
        let zero = g.constant(Tensor::zeros(&[1, 1]));
        let y0 = swiglu_ffn(&mut g, zero, &w).unwrap();
        assert_eq!(g.value(y0).item(), 0.0);
    }

    #[test]
    fn energy_curvature_identity_and_bias() {
        let mut g = Graph::<f64>::new();
        let a = Tensor::from_fn(&[1, 2, 1, 3, 3], |i| (i as f64 * 0.4).sin().abs());
        let av = g.constant(a.clone());
        let eye = g.constant(Tensor::from_fn(&[2, 3, 3], |i| if (i % 9) / 3 == i % 3 { 1.0 } else { 0.0 }));
        let zb = g.constant(Tensor::zeros(&[2, 3]));
        let out = energy_curvature(&mut g, av, eye, zb, 2, 1).unwrap();
        assert_eq!(g.value(out).data(), a.data());
        let zero_a = g.constant(Tensor::zeros(&[1, 2, 1, 3, 3]));
        let b = g.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let out = energy_curvature(&mut g, zero_a, eye, b, 2, 1).unwrap();
        assert_eq!(g.value(out).data()[..9], [1., 2., 3., 1., 2., 3., 1., 2., 3.]);
        assert_eq!(g.value(out).data()[9..12], [4., 5., 6.]);
    }

    #[test]
    fn energy_curvature_columns_are_superpositions() {
        let (h, t, d) = (2, 2, 3);
        let mut g = Graph::<f64>::new();
        let a = Tensor::from_fn(&[1, h, t, d, d], |i| (i as f64 * 0.7).sin().abs());
        let w = Tensor::from_fn(&[h, d, d], |i| (i as f64 * 1.3).cos());
        let b = Tensor::from_fn(&[h, d], |i| 0.1 * i as f64 - 0.2);
        let (av, wv, bv) = (g.constant(a.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let out = energy_curvature(&mut g, av, wv, bv, h, t).unwrap();
        let out = g.value(out).data();
        for hh in 0..h {
            for tt in 0..t {
                let base = (hh * t + tt) * d * d;
                for i in 0..d {
                    for j in 0..d {
                        let want =
                            (0..d).map(|k| a.data()[base + i * d + k] * w.data()[hh * d * d + k * d + j]).sum::<f64>()
                                + b.data()[hh * d + j];
                        assert!((out[base + i * d + j] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn metric_learner_output_is_square_and_nonnegative() {
        let cfg = tiny_cfg();
        let mut reg = ParamRegistry::default();
        let layout = MetricLearnerWeights::register(&mut reg, "m", &cfg, 0.3);
        let store = ParamStore::<f64>::initialize(&reg.into_specs(), 3);
        for n_tok in [1, 5] {
            let mut g = Graph::new();
            let vars = store.bind(&mut g, false);
            let w = layout.bind(&vars);
            let q = g.constant(Tensor::from_fn(&[3, n_tok, 4], |i| (i as f64 * 1.3).cos() * 2.0));
            let a = metric_learner(&mut g, q, &w).unwrap();
            assert_eq!(g.shape(a), &[3, n_tok, 4, 4]);
            assert!(g.value(a).data().iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn mha_single_position_attends_to_itself() {
        let cfg = tiny_cfg();
        let mut reg = ParamRegistry::default();
        let layout = AttentionWeights::register(&mut reg, "attn", &cfg, 0.2);
        let store = ParamStore::<f64>::initialize(&reg.into_specs(), 5);
        let mut g = Graph::new();
        let vars = store.bind(&mut g, false);
        let w = layout.bind(&vars);
        let xv = Tensor::from_fn(&[1, 8], |i| i as f64 * 0.1 - 0.3);
        let x = g.constant(xv.clone());
        let (y, ded) = plga_mha(&mut g, &cfg, &w, x, SeqShape { batch: 1, seq: 1, last: &[0] }).unwrap();
        assert_eq!(g.shape(y), &[1, 8]);
        assert_eq!(g.shape(ded.a_lm), &[1, 2, 4, 4]);
        // one position: attention weight 1 on itself, so y = (x·Wv)·Wo
        let mut g2 = Graph::new();
        let vars2 = store.bind(&mut g2, false);
        let x2 = g2.constant(xv);
        let v = g2.linear(x2, vars2[layout.wv]).unwrap();
        let o = g2.linear(v, vars2[layout.wo]).unwrap();
        assert!(g.value(y).max_abs_diff(g2.value(o)) < 1e-14);
    }
}
