//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `"PLDR"`, `u32` version, `u8` precision (0 = f32, 1 = f64), `u64` header
//! length, canonical JSON header, `u32` array count, then per array `u32`
//! name length, name, `u32` rank, `u64` dims, raw values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::model::{param_specs, Model, ModelConfig};
use crate::params::ParamStore;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;

use super::engine::{RunningWindow, TrainState};
use super::optim::AdamState;

pub const MAGIC: &[u8; 4] = b"PLDR";
pub const FORMAT_VERSION: u32 = 1;

/// JSON part of a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub step: u64,
    pub batches_consumed: u64,
    pub rejected: u64,
    pub seed: u64,
    pub window: RunningWindow,
}

/// Header fields needed before choosing an element type.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub version: u32,
    pub precision: Precision,
    pub header: CheckpointHeader,
}

fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::F32 => 0,
        Precision::F64 => 1,
    }
}

/// Serializes `state` into the container format.
pub fn encode_checkpoint<T: Scalar>(state: &TrainState<T>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        model: state.model.config().clone(),
        step: state.step,
        batches_consumed: state.batches_consumed,
        rejected: state.rejected,
        seed: state.seed,
        window: state.window.clone(),
    };
    // going through Value sorts object keys
    let json = serde_json::to_string(&serde_json::to_value(&header)?)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(precision_tag(T::PRECISION));
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    let params = state.model.params();
    let names = params.names();
    out.extend_from_slice(&((names.len() * 3) as u32).to_le_bytes());
    let groups = [("param", params.tensors()), ("adam_m", &state.adam.m[..]), ("adam_v", &state.adam.v[..])];
    for (prefix, tensors) in groups {
        for (name, t) in names.iter().zip(tensors) {
            let full = format!("{prefix}/{name}");
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(state)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated file at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn read_info(r: &mut Reader<'_>) -> Result<CheckpointInfo> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, this build reads version {FORMAT_VERSION}")));
    }
    let precision = match r.take(1)?[0] {
        0 => Precision::F32,
        1 => Precision::F64,
        t => return Err(Error::Checkpoint(format!("unknown precision tag {t}"))),
    };
    let len = r.u64()? as usize;
    let header: CheckpointHeader =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    Ok(CheckpointInfo { version, precision, header })
}

/// Reads only the header of a checkpoint file.
pub fn read_checkpoint_info(path: &Path) -> Result<CheckpointInfo> {
    let mut f = fs::File::open(path)?;
    let mut head = vec![0u8; 17];
    f.read_exact(&mut head).map_err(|_| Error::Checkpoint("truncated file".into()))?;
    let len = u64::from_le_bytes(head[9..17].try_into().expect("8 bytes")) as usize;
    let mut rest = vec![0u8; len];
    f.read_exact(&mut rest).map_err(|_| Error::Checkpoint("truncated header".into()))?;
    head.extend(rest);
    read_info(&mut Reader { bytes: &head, pos: 0 })
}

/// First path at which two JSON values differ, like `model.d_model`.
fn first_difference(prefix: &str, a: &Value, b: &Value) -> Option<String> {
    match (a, b) {
        (Value::Object(x), Value::Object(y)) => {
            let mut keys: Vec<&String> = x.keys().chain(y.keys()).collect();
            keys.sort();
            keys.dedup();
            keys.into_iter().find_map(|k| {
                let path = format!("{prefix}.{k}");
                match (x.get(k), y.get(k)) {
                    (Some(u), Some(v)) => first_difference(&path, u, v),
                    _ => Some(path),
                }
            })
        }
        _ if a == b => None,
        _ => Some(prefix.to_string()),
    }
}

/// Errors naming the first field where `found` differs from `expected`.
pub fn check_config(found: &ModelConfig, expected: &ModelConfig) -> Result<()> {
    let (a, b) = (serde_json::to_value(found)?, serde_json::to_value(expected)?);
    match first_difference("model", &a, &b) {
        None => Ok(()),
        Some(path) => {
            let leaf = |v: &Value| path.split('.').skip(1).fold(Some(v), |v, k| v.and_then(|v| v.get(k))).cloned();
            Err(Error::Checkpoint(format!(
                "config mismatch at {path}: checkpoint has {}, expected {}",
                leaf(&a).unwrap_or(Value::Null),
                leaf(&b).unwrap_or(Value::Null)
            )))
        }
    }
}

/// Rebuilds a training state. With `expected`, the stored model config must
/// match it field for field.
pub fn decode_checkpoint<T: Scalar>(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<TrainState<T>> {
    let mut r = Reader { bytes, pos: 0 };
    let info = read_info(&mut r)?;
    if info.precision != T::PRECISION {
        return Err(Error::Checkpoint(format!(
            "checkpoint stores {:?} values, requested {:?}",
            info.precision,
            T::PRECISION
        )));
    }
    let h = info.header;
    if let Some(e) = expected {
        check_config(&h.model, e)?;
    }
    h.model.validate()?;
    let specs = param_specs(&h.model);
    let count = r.u32()? as usize;
    if count != specs.len() * 3 {
        return Err(Error::Checkpoint(format!("{count} arrays, expected {}", specs.len() * 3)));
    }
    let width = T::PRECISION.byte_width();
    let mut groups: [Vec<Tensor<T>>; 3] = Default::default();
    for (g, prefix) in ["param", "adam_m", "adam_v"].iter().enumerate() {
        for spec in &specs {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let want = format!("{prefix}/{}", spec.name);
            if name != want {
                return Err(Error::Checkpoint(format!("found array {name}, expected {want}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != spec.shape {
                return Err(Error::Checkpoint(format!("{name} has shape {shape:?}, expected {:?}", spec.shape)));
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * width)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            groups[g].push(Tensor::new(&shape, data)?);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let [params, m, v] = groups;
    let model = Model::from_params(h.model, ParamStore::from_parts(&specs, params)?)?;
    Ok(TrainState {
        step: h.step,
        model,
        adam: AdamState { m, v },
        batches_consumed: h.batches_consumed,
        rejected: h.rejected,
        seed: h.seed,
        window: h.window,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path, expected: Option<&ModelConfig>) -> Result<TrainState<T>> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig { vocab_size: 11, residual_units: 1, context_length: 8, ..ModelConfig::v5(1, 2, 8) }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut st = TrainState::<f32>::new(tiny(), 4).unwrap();
        st.step = 17;
        st.batches_consumed = 40;
        st.window.loss_sum = 0.1 + 0.2;
        st.adam.v[0].data_mut()[0] = 1.5e-7;
        let a = encode_checkpoint(&st).unwrap();
        let back: TrainState<f32> = decode_checkpoint(&a, Some(&tiny())).unwrap();
        assert_eq!(back, st);
        assert_eq!(encode_checkpoint(&back).unwrap(), a);
    }

    #[test]
    fn mismatches_are_named() {
        let st = TrainState::<f64>::new(tiny(), 4).unwrap();
        let bytes = encode_checkpoint(&st).unwrap();
        let other = ModelConfig { d_model: 12, ..tiny() };
        let err = decode_checkpoint::<f64>(&bytes, Some(&other)).unwrap_err().to_string();
        assert!(err.contains("model.d_model") && err.contains("12"), "{err}");
        assert!(decode_checkpoint::<f32>(&bytes, None).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode_checkpoint::<f64>(&bad, None).unwrap_err().to_string().contains("version"));
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3], None).is_err());
    }

    #[test]
    fn header_only_read() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pldr");
        save_checkpoint(&TrainState::<f64>::new(tiny(), 1).unwrap(), &p).unwrap();
        let info = read_checkpoint_info(&p).unwrap();
        assert_eq!(info.precision, Precision::F64);
        assert_eq!(info.header.model, tiny());
    }
}
