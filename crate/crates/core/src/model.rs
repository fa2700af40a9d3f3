//! Decoder-only language model: embedding, stacked power-law attention
//! decoder layers and an untied vocabulary head.

use serde::{Deserialize, Serialize};

use crate::attention::{
    plga_mha, swiglu_ffn, swiglu_param_count, AttentionConfig, AttentionWeights, DeductiveOutputs, DeductiveVars,
    Flavor, SeqShape, SwiGluWeights,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels::LAYER_NORM_EPS;
use crate::params::{Init, ParamRegistry, ParamSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture hyperparameters of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub flavor: Flavor,
    pub residual_units: usize,
    pub metric_gated_size: usize,
    pub metric_linear_size: usize,
    pub rope_base: f64,
    pub ffn_gated_size: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub pad_id: u32,
    pub end_id: u32,
}

impl ModelConfig {
    /// v5 model with `d_k = d_model / n_heads` and the default vocabulary
    /// (32000 pieces, pad 0, end 1) and context (1024).
    pub fn v5(n_layers: usize, n_heads: usize, d_model: usize) -> Self {
        let att = AttentionConfig::v5(n_heads, d_model / n_heads);
        Self::from_attention(n_layers, &att)
    }

    pub fn v9(n_layers: usize, n_heads: usize, d_model: usize, gated: usize, linear: usize) -> Self {
        let att = AttentionConfig::v9(n_heads, d_model / n_heads, gated, linear);
        Self::from_attention(n_layers, &att)
    }

    pub fn from_attention(n_layers: usize, att: &AttentionConfig) -> Self {
        Self {
            n_layers,
            n_heads: att.n_heads,
            d_model: att.d_model,
            d_k: att.d_k,
            flavor: att.flavor,
            residual_units: att.residual_units,
            metric_gated_size: att.metric_gated_size,
            metric_linear_size: att.metric_linear_size,
            rope_base: att.rope_base,
            ffn_gated_size: 8 * att.d_model / 3,
            vocab_size: 32_000,
            context_length: 1024,
            pad_id: 0,
            end_id: 1,
        }
    }

    /// 2 layers, 2 heads of width 16, sized for the 259-entry byte vocabulary.
    pub fn tiny_byte_level() -> Self {
        Self {
            vocab_size: crate::data::BYTE_VOCAB_SIZE,
            pad_id: crate::data::BYTE_PAD_ID,
            end_id: crate::data::BYTE_END_ID,
            context_length: 64,
            ..Self::v5(2, 2, 32)
        }
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_k: self.d_k,
            flavor: self.flavor,
            residual_units: self.residual_units,
            metric_gated_size: self.metric_gated_size,
            metric_linear_size: self.metric_linear_size,
            rope_base: self.rope_base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.n_layers == 0 {
            return Err(Error::Config("model.n_layers must be positive".into()));
        }
        if self.vocab_size == 0 || self.pad_id as usize >= self.vocab_size || self.end_id as usize >= self.vocab_size {
            return Err(Error::Config(format!(
                "model.pad_id ({}) and model.end_id ({}) must lie in the vocabulary of {}",
                self.pad_id, self.end_id, self.vocab_size
            )));
        }
        if self.context_length < 2 {
            return Err(Error::Config("model.context_length must be at least 2".into()));
        }
        if self.ffn_gated_size == 0 {
            return Err(Error::Config("model.ffn_gated_size must be positive".into()));
        }
        Ok(())
    }

    /// Standard deviation of the normal initializer for projection weights.
    pub fn init_std(&self) -> f64 {
        0.02 / (2.0 * self.n_layers as f64).sqrt()
    }
}

/// Closed-form number of learned scalars.
pub fn param_count(c: &ModelConfig) -> usize {
    let (v, dm, d, h) = (c.vocab_size, c.d_model, c.d_k, c.n_heads);
    let (m, gated) = (c.metric_linear_size, c.metric_gated_size);
    let embeddings = 2 * v * dm + 2 * dm;
    let projections = 4 * dm * dm;
    let metric = d * d
        + 2 * d
        + if c.flavor == Flavor::V9 { 2 * d * m } else { 0 }
        + c.residual_units * 2 * swiglu_param_count(m, gated, m);
    let per_head = h * (2 * d * d + d);
    let ffn = swiglu_param_count(dm, c.ffn_gated_size, dm);
    let norms = 4 * dm;
    embeddings + c.n_layers * (projections + metric + per_head + ffn + norms)
}

#[derive(Debug, Clone, PartialEq)]
struct LayerLayout {
    attn: AttentionWeights<usize>,
    norm1: (usize, usize),
    ffn: SwiGluWeights<usize>,
    norm2: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embed: usize,
    embed_norm: (usize, usize),
    layers: Vec<LayerLayout>,
    head: usize,
}

fn norm_pair(reg: &mut ParamRegistry, prefix: &str, width: usize) -> (usize, usize) {
    (
        reg.add(format!("{prefix}.gain"), &[width], Init::Ones, false),
        reg.add(format!("{prefix}.bias"), &[width], Init::Zeros, false),
    )
}

fn build_layout(c: &ModelConfig) -> (Layout, Vec<ParamSpec>) {
    let std = c.init_std();
    let att = c.attention();
    let mut reg = ParamRegistry::default();
    let embed = reg.add("embed", &[c.vocab_size, c.d_model], Init::Normal(std), true);
    let embed_norm = norm_pair(&mut reg, "embed_norm", c.d_model);
    let layers = (0..c.n_layers)
        .map(|l| {
            let p = format!("layer{l}");
            LayerLayout {
                attn: AttentionWeights::register(&mut reg, &format!("{p}.attn"), &att, std),
                norm1: norm_pair(&mut reg, &format!("{p}.norm1"), c.d_model),
                ffn: SwiGluWeights::register(
                    &mut reg,
                    &format!("{p}.ffn"),
                    c.d_model,
                    c.ffn_gated_size,
                    c.d_model,
                    std,
                ),
                norm2: norm_pair(&mut reg, &format!("{p}.norm2"), c.d_model),
            }
        })
        .collect();
    let head = reg.add("head", &[c.d_model, c.vocab_size], Init::Normal(std), true);
    (Layout { embed, embed_norm, layers, head }, reg.into_specs())
}

/// Parameter specs in allocation order, without allocating.
pub fn param_specs(c: &ModelConfig) -> Vec<ParamSpec> {
    build_layout(c).1
}

/// Token ids laid out `[batch, seq]`. `last` is the position of each row
/// whose deductive outputs are reported.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub last: Vec<usize>,
}

impl ModelInput {
    /// Unpadded rows of equal length.
    pub fn dense(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || seq == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Input("rows of unequal length".into()));
        }
        Ok(Self { ids: rows.concat(), batch: rows.len(), seq, last: vec![seq - 1; rows.len()] })
    }

    pub fn single(ids: &[usize]) -> Result<Self> {
        Self::dense(&[ids.to_vec()])
    }
}

/// Tape handles produced by [`Model::forward_graph`].
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[B·T, vocab]`.
    pub logits: Var,
    pub deductive: Vec<DeductiveVars>,
    pub params: Vec<Var>,
}

/// Logits and deductive outputs of a frozen forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult<T> {
    /// `[B, T, vocab]`.
    pub logits: Tensor<T>,
    pub deductive: DeductiveOutputs<T>,
    /// Input was longer than the trained context.
    pub beyond_context: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    layout: Layout,
    params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        let params = ParamStore::initialize(&specs, seed);
        Ok(Self { config, layout, params })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = build_layout(&config);
        if params.len() != specs.len() || params.names().iter().zip(&specs).any(|(n, s)| *n != s.name) {
            return Err(Error::Checkpoint("parameter names do not match the model configuration".into()));
        }
        let params = ParamStore::from_parts(&specs, params.tensors().to_vec())?;
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Records a forward pass on `g`.
    pub fn forward_graph(&self, g: &mut Graph<T>, input: &ModelInput, requires_grad: bool) -> Result<ForwardVars> {
        let c = &self.config;
        let (b, t) = (input.batch, input.seq);
        if b == 0 || t == 0 || input.ids.len() != b * t || input.last.len() != b {
            return Err(Error::Input(format!(
                "batch of {} ids does not form [{b}, {t}] with {} row ends",
                input.ids.len(),
                input.last.len()
            )));
        }
        if input.last.iter().any(|&l| l >= t) {
            return Err(Error::Input("reported position beyond sequence".into()));
        }
        let vars = self.params.bind(g, requires_grad);
        let eps = T::from_f64(LAYER_NORM_EPS);
        let att = c.attention();
        let shape = SeqShape { batch: b, seq: t, last: &input.last };

        let x = g.embedding(vars[self.layout.embed], &input.ids)?;
        let x = g.scale(x, T::from_f64((c.d_model as f64).sqrt()));
        let (eg, eb) = self.layout.embed_norm;
        let mut x = g.layer_norm(x, vars[eg], vars[eb], eps)?;

        let mut deductive = Vec::with_capacity(c.n_layers);
        for layer in &self.layout.layers {
            let w = layer.attn.bind(&vars);
            let (a, ded) = plga_mha(g, &att, &w, x, shape)?;
            let h1 = g.add(x, a)?;
            let h1 = g.layer_norm(h1, vars[layer.norm1.0], vars[layer.norm1.1], eps)?;
            let f = swiglu_ffn(g, h1, &layer.ffn.bind(&vars))?;
            let h2 = g.add(h1, f)?;
            x = g.layer_norm(h2, vars[layer.norm2.0], vars[layer.norm2.1], eps)?;
            deductive.push(ded);
        }
        let logits = g.linear(x, vars[self.layout.head])?;
        Ok(ForwardVars { logits, deductive, params: vars })
    }

    /// Frozen forward pass returning values only.
    pub fn forward(&self, input: &ModelInput) -> Result<ForwardResult<T>> {
        let mut g = Graph::new();
        let fv = self.forward_graph(&mut g, input, false)?;
        let logits = g.value(fv.logits).clone().reshape(&[input.batch, input.seq, self.config.vocab_size])?;
        let beyond_context = input.seq > self.config.context_length;
        if beyond_context {
            log::warn!(
                "sequence of {} tokens exceeds the trained context of {}",
                input.seq,
                self.config.context_length
            );
        }
        Ok(ForwardResult { logits, deductive: DeductiveOutputs::from_vars(&g, &fv.deductive), beyond_context })
    }
}
