use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{channel, Sender};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dag::DagValue;
use crate::error::{Error, Result};

/// Logging and validation cadence. The defaults are the full-scale values;
/// `telemetry_scale` shrinks all three at once.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TelemetryConfig {
    #[serde(default = "defaults::log_every")]
    pub log_every: u64,
    #[serde(default = "defaults::val_every")]
    pub val_every: u64,
    #[serde(default = "defaults::val_batches")]
    pub val_batches: u64,
    #[serde(default = "defaults::scale")]
    pub telemetry_scale: f64,
}

mod defaults {
    pub fn log_every() -> u64 {
        2000
    }
    pub fn val_every() -> u64 {
        12000
    }
    pub fn val_batches() -> u64 {
        2000
    }
    pub fn scale() -> f64 {
        1.0
    }
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        Self {
            log_every: defaults::log_every(),
            val_every: defaults::val_every(),
            val_batches: defaults::val_batches(),
            telemetry_scale: defaults::scale(),
        }
    }
}

impl TelemetryConfig {
    pub fn scaled(scale: f64) -> Self {
        Self { telemetry_scale: scale, ..Self::default() }
    }

    fn apply(&self, n: u64) -> u64 {
        ((n as f64 * self.telemetry_scale).round() as u64).max(1)
    }

    pub fn effective_log_every(&self) -> u64 {
        self.apply(self.log_every)
    }

    pub fn effective_val_every(&self) -> u64 {
        self.apply(self.val_every)
    }

    pub fn effective_val_batches(&self) -> u64 {
        self.apply(self.val_batches)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.telemetry_scale > 0.0 && self.telemetry_scale.is_finite()) {
            return Err(Error::Config("telemetry.telemetry_scale must be positive".into()));
        }
        if self.log_every == 0 || self.val_every == 0 || self.val_batches == 0 {
            return Err(Error::Config("telemetry cadences must be positive".into()));
        }
        Ok(())
    }
}

/// One telemetry line.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    Train { step: u64, lr: f64, train_loss: f64, train_acc: f64, dl: [DagValue; 3], dlr: f64, rejected_steps: u64 },
    Validation { step: u64, val_loss: f64, val_acc: f64, tokens: u64 },
    Eval { corpus: String, loss: f64, accuracy: f64, tokens: u64 },
}

fn dl_json(v: DagValue) -> Value {
    match v {
        DagValue::Finite(x) => json!(x),
        DagValue::Overflow => json!("overflow"),
    }
}

impl Record {
    pub fn to_json(&self) -> Value {
        match self {
            Record::Train { step, lr, train_loss, train_acc, dl, dlr, rejected_steps } => {
                let flags: Vec<&str> = crate::dag::DeductiveKind::ALL
                    .iter()
                    .zip(dl)
                    .filter(|(_, v)| v.is_overflow())
                    .map(|(k, _)| k.label())
                    .collect();
                json!({
                    "kind": "train",
                    "step": step,
                    "lr": lr,
                    "train_loss": train_loss,
                    "train_acc": train_acc,
                    "dl_alm": dl_json(dl[0]),
                    "dl_ap": dl_json(dl[1]),
                    "dl_glm": dl_json(dl[2]),
                    "dlr": dlr,
                    "overflow_flags": flags,
                    "rejected_steps": rejected_steps,
                })
            }
            Record::Validation { step, val_loss, val_acc, tokens } => json!({
                "kind": "validation",
                "step": step,
                "val_loss": val_loss,
                "val_acc": val_acc,
                "tokens": tokens,
            }),
            Record::Eval { corpus, loss, accuracy, tokens } => json!({
                "kind": "eval",
                "corpus": corpus,
                "eval_loss": loss,
                "eval_acc": accuracy,
                "tokens": tokens,
            }),
        }
    }
}

/// Asynchronous, lossless JSONL writer: records go through a channel to a
/// writer thread that owns the file.
pub struct TelemetrySink {
    tx: Option<Sender<Value>>,
    worker: Option<JoinHandle<std::io::Result<()>>>,
    path: Option<PathBuf>,
}

impl TelemetrySink {
    /// Drops every record.
    pub fn disabled() -> Self {
        Self { tx: None, worker: None, path: None }
    }

    /// Appends to `path`, creating it and its directory when needed.
    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let file = File::options().create(true).append(true).open(path)?;
        let (tx, rx) = channel::<Value>();
        let worker = std::thread::spawn(move || {
            let mut out = BufWriter::new(file);
            for v in rx {
                serde_json::to_writer(&mut out, &v)?;
                out.write_all(b"\n")?;
            }
            out.flush()
        });
        Ok(Self { tx: Some(tx), worker: Some(worker), path: Some(path.to_path_buf()) })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn send(&self, record: &Record) {
        if let Some(tx) = &self.tx {
            // the receiver only goes away in finish()
            let _ = tx.send(record.to_json());
        }
    }

    /// Flushes everything sent so far and stops the writer.
    pub fn finish(mut self) -> Result<()> {
        self.close()
    }

    fn close(&mut self) -> Result<()> {
        self.tx.take();
        if let Some(w) = self.worker.take() {
            w.join().map_err(|_| Error::Contract("telemetry writer panicked".into()))??;
        }
        Ok(())
    }
}

impl Drop for TelemetrySink {
    fn drop(&mut self) {
        if let Err(e) = self.close() {
            log::error!("telemetry writer failed: {e}");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cadence_scaling() {
        let t = TelemetryConfig::scaled(0.01);
        assert_eq!((t.effective_log_every(), t.effective_val_every(), t.effective_val_batches()), (20, 120, 20));
        let t = TelemetryConfig::scaled(1e-9);
        assert_eq!(t.effective_log_every(), 1);
    }

    #[test]
    fn writes_every_record_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/run.jsonl");
        let sink = TelemetrySink::to_file(&path).unwrap();
        for step in 0..500 {
            sink.send(&Record::Train {
                step,
                lr: 1e-3,
                train_loss: 2.0,
                train_acc: 0.5,
                dl: [DagValue::Finite(0.0), DagValue::Overflow, DagValue::Finite(1e-3)],
                dlr: 0.0,
                rejected_steps: 0,
            });
        }
        sink.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 500);
        assert_eq!(lines[499]["step"], 499);
        assert_eq!(lines[0]["dl_ap"], "overflow");
        assert_eq!(lines[0]["overflow_flags"], json!(["A_P"]));
    }
}
