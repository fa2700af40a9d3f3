//! Run configuration files and the named model presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dag::DagCoefficients;
use crate::data::TokenizerConfig;
use crate::error::{Error, Result};
use crate::generate::GenerationParams;
use crate::model::ModelConfig;
use crate::scalar::Precision;
use crate::train::{OptimizerConfig, TelemetryConfig, TrainConfig};

/// Corpus locations and batching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// One document per line, or JSONL with a `text` field.
    pub train: PathBuf,
    #[serde(default)]
    pub validation: Option<PathBuf>,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    /// Chunks per packed batch.
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    /// Packed batches accumulated into one optimizer step.
    #[serde(default = "defaults::micro_batches")]
    pub micro_batches: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
}

mod defaults {
    use crate::scalar::Precision;

    pub fn batch_size() -> usize {
        16
    }
    pub fn micro_batches() -> usize {
        2
    }
    pub fn epochs() -> usize {
        1
    }
    pub fn precision() -> Precision {
        Precision::F32
    }
}

/// Everything needed to reproduce a run together with the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model_id: String,
    pub seed: u64,
    #[serde(default = "defaults::precision")]
    pub precision: Precision,
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub dag: DagCoefficients,
    pub data: DataConfig,
    #[serde(default)]
    pub telemetry: TelemetryConfig,
    #[serde(default)]
    pub generation: GenerationParams,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads a config file; relative data paths are taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        if let Some(dir) = path.parent() {
            c.resolve_paths(dir);
        }
        Ok(c)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        fix(&mut self.data.train);
        if let Some(v) = self.data.validation.as_mut() {
            fix(v);
        }
        if let Some(v) = self.data.tokenizer.vocab.as_mut() {
            fix(v);
        }
    }

    /// Pretty JSON with sorted keys.
    pub fn to_canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&serde_json::to_value(self)?)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train_config().validate()?;
        self.generation.validate()?;
        if self.data.batch_size == 0 {
            return Err(Error::Config("data.batch_size must be positive".into()));
        }
        if self.model_id.is_empty() || self.model_id.contains(',') {
            return Err(Error::Config("model_id must be nonempty and free of commas".into()));
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: self.optimizer.clone(),
            dag: self.dag,
            micro_batches: self.data.micro_batches,
            epochs: self.data.epochs,
            telemetry: self.telemetry.clone(),
            stop_at: None,
        }
    }
}

/// Architecture of a named preset, e.g. `PLDRv5-2` or `PLDRv5-DAG-4`.
pub fn preset_model(name: &str) -> Option<ModelConfig> {
    let c = match name {
        "PLDRv5-1" => ModelConfig::v5(7, 12, 768),
        "PLDRv5-2" => ModelConfig::v5(5, 14, 896),
        "PLDRv5-3" => ModelConfig::v5(3, 20, 1408),
        "PLDRv5-4" => ModelConfig::v5(1, 42, 2688),
        "PLDRv9-1" => ModelConfig::v9(4, 15, 960, 300, 112),
        "PLDRv9-2" => ModelConfig::v9(3, 20, 1280, 300, 112),
        _ if preset_coefficients(name).is_some() || name == "PLDRv5-ab-1" => ModelConfig::v5(5, 14, 896),
        _ => return None,
    };
    Some(c)
}

/// Regularization strengths of a named preset; unregularized presets are all off.
pub fn preset_coefficients(name: &str) -> Option<DagCoefficients> {
    let on = |a: f64, b: f64, c: f64| DagCoefficients { lambda1: Some(a), lambda2: Some(b), lambda3: Some(c) };
    Some(match name {
        "PLDRv5-DAG-1" => on(0.05, 0.05, 0.05),
        "PLDRv5-DAG-2" => on(0.02, 0.02, 0.02),
        "PLDRv5-DAG-3" => on(0.01, 0.01, 0.01),
        "PLDRv5-DAG-4" => on(0.005, 0.005, 0.005),
        "PLDRv5-DAG-5" => on(1.0, 0.005, 0.005),
        "PLDRv5-DAG-6" => DagCoefficients { lambda1: Some(0.005), ..DagCoefficients::OFF },
        "PLDRv5-DAG-7" => on(0.001, 0.005, 0.005),
        "PLDRv5-1" | "PLDRv5-2" | "PLDRv5-3" | "PLDRv5-4" | "PLDRv9-1" | "PLDRv9-2" | "PLDRv5-ab-1" => {
            DagCoefficients::OFF
        }
        _ => return None,
    })
}

/// Names accepted by [`preset`].
pub const PRESETS: [&str; 14] = [
    "PLDRv5-1",
    "PLDRv5-2",
    "PLDRv5-3",
    "PLDRv5-4",
    "PLDRv9-1",
    "PLDRv9-2",
    "PLDRv5-DAG-1",
    "PLDRv5-DAG-2",
    "PLDRv5-DAG-3",
    "PLDRv5-DAG-4",
    "PLDRv5-DAG-5",
    "PLDRv5-DAG-6",
    "PLDRv5-DAG-7",
    "PLDRv5-ab-1",
];

/// Full-scale run of a named table row: batch 32 as 2 x 16, 1024-token
/// context, 250k steps, learning rate and warm-up per row.
pub fn preset(name: &str) -> Option<RunConfig> {
    let model = preset_model(name)?;
    let dag = preset_coefficients(name)?;
    let max_lr = match name {
        "PLDRv5-DAG-1" | "PLDRv5-DAG-3" => 1.2e-3,
        "PLDRv5-ab-1" => 6e-4,
        _ => 1e-3,
    };
    let warmup = if matches!(name, "PLDRv5-1" | "PLDRv9-1") { 8000 } else { 2000 };
    Some(RunConfig {
        model_id: name.to_string(),
        seed: 0,
        precision: Precision::F32,
        model,
        optimizer: OptimizerConfig::new(max_lr, warmup, 250_000),
        dag,
        data: DataConfig {
            train: PathBuf::from("train.jsonl"),
            validation: Some(PathBuf::from("validation.jsonl")),
            tokenizer: TokenizerConfig {
                vocab: Some(PathBuf::from("unigram-32k.vocab")),
                ..TokenizerConfig::default()
            },
            batch_size: defaults::batch_size(),
            micro_batches: defaults::micro_batches(),
            epochs: 1,
        },
        telemetry: TelemetryConfig::default(),
        generation: GenerationParams::default(),
    })
}
