//! Checkpoint archive.
//!
//! A safetensors file. Tensors are stored under
//! - `param/<name>`: model parameters
//! - `adam_m/<name>`, `adam_v/<name>`: optimizer moments (optional)
//!
//! in the model dtype (f64 by default). The header's `__metadata__` map has a
//! single key, `dmlm`, holding the [`CheckpointMeta`] JSON. Tensor order and
//! header layout are fixed, so identical state gives identical bytes.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use super::TrainingConfig;
use crate::encoders::{DualEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::optim::Moments;
use crate::nn::AdamW;

pub const FORMAT_VERSION: u32 = 1;
const META_KEY: &str = "dmlm";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub training: TrainingConfig,
    pub step: usize,
    pub total_steps: usize,
    pub adam_steps: u64,
    pub vocab_hash: String,
    pub classes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub dtype: DType,
    pub params: BTreeMap<String, Tensor>,
    pub adam: BTreeMap<String, Moments>,
}

fn to_bytes(t: &Tensor) -> Result<(Dtype, Vec<usize>, Vec<u8>)> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (Dtype::F64, shape, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F32 => (Dtype::F32, shape, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(Error::Contract(format!("cannot checkpoint dtype {other:?}"))),
    })
}

pub fn save_checkpoint(path: &Path, model: &DualEncoder, opt: Option<&AdamW>, meta: &CheckpointMeta) -> Result<()> {
    let mut owned: Vec<(String, (Dtype, Vec<usize>, Vec<u8>))> = Vec::new();
    for (name, p) in model.params().iter() {
        owned.push((format!("param/{name}"), to_bytes(p.var.as_tensor())?));
    }
    if let Some(opt) = opt {
        for (name, m) in opt.state() {
            owned.push((format!("adam_m/{name}"), to_bytes(&m.first)?));
            owned.push((format!("adam_v/{name}"), to_bytes(&m.second)?));
        }
    }
    let views = owned
        .iter()
        .map(|(name, (dt, shape, data))| Ok((name.clone(), TensorView::new(*dt, shape.clone(), data).map_err(st_err)?)))
        .collect::<Result<Vec<_>>>()?;
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(meta)?)]);
    let bytes = safetensors::serialize(views, &Some(info)).map_err(st_err)?;
    crate::io::write_atomic(path, &bytes)
}

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Contract(format!("safetensors: {e:?}"))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |offset: u64, reason: String| Error::Checkpoint {
        path: path.to_path_buf(),
        offset,
        reason,
    };
    if bytes.len() < 8 {
        return Err(corrupt(0, format!("file is {} bytes, shorter than the header length field", bytes.len())));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = 8u64.checked_add(n).filter(|&e| e <= bytes.len() as u64).ok_or_else(|| {
        corrupt(0, format!("header length {n} runs past the end of a {}-byte file", bytes.len()))
    })?;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..header_end as usize])
        .map_err(|e| corrupt(8 + e.column().saturating_sub(1) as u64, format!("header is not valid JSON: {e}")))?;
    let meta_str = header
        .pointer(&format!("/__metadata__/{META_KEY}"))
        .and_then(|v| v.as_str())
        .ok_or_else(|| corrupt(8, "header has no run metadata".into()))?;
    let meta: CheckpointMeta =
        serde_json::from_str(meta_str).map_err(|e| corrupt(8, format!("run metadata does not parse: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(corrupt(8, format!("unsupported format version {}", meta.format_version)));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| corrupt(header_end, format!("{e:?}")))?;

    let mut dtype = None;
    let mut params = BTreeMap::new();
    let mut firsts = BTreeMap::new();
    let mut seconds = BTreeMap::new();
    for (name, view) in st.tensors() {
        let dt = match view.dtype() {
            Dtype::F64 => DType::F64,
            Dtype::F32 => DType::F32,
            other => return Err(corrupt(header_end, format!("tensor `{name}` has unsupported dtype {other:?}"))),
        };
        if *dtype.get_or_insert(dt) != dt {
            return Err(corrupt(header_end, "tensors have mixed dtypes".into()));
        }
        let t = Tensor::from_raw_buffer(view.data(), dt, view.shape(), &Device::Cpu)?;
        if let Some(p) = name.strip_prefix("param/") {
            params.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix("adam_m/") {
            firsts.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix("adam_v/") {
            seconds.insert(p.to_string(), t);
        } else {
            return Err(corrupt(8, format!("unexpected tensor `{name}`")));
        }
    }
    let mut adam = BTreeMap::new();
    for (name, first) in firsts {
        let second = seconds
            .remove(&name)
            .ok_or_else(|| corrupt(8, format!("optimizer state for `{name}` lacks its second moment")))?;
        adam.insert(name, Moments { first, second });
    }
    if !seconds.is_empty() {
        return Err(corrupt(8, "optimizer second moments without first moments".into()));
    }
    Ok(Checkpoint {
        meta,
        dtype: dtype.unwrap_or(DType::F64),
        params,
        adam,
    })
}

/// Errors with the differing top-level fields unless `a == b`.
pub fn expect_same<T: Serialize + PartialEq>(what: &str, stored: &T, given: &T) -> Result<()> {
    if stored == given {
        return Ok(());
    }
    let (a, b) = (serde_json::to_value(stored)?, serde_json::to_value(given)?);
    let fields: Vec<String> = match (a.as_object(), b.as_object()) {
        (Some(a), Some(b)) => a
            .iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: checkpoint {v}, given {}", b.get(k).unwrap_or(&serde_json::Value::Null)))
            .collect(),
        _ => vec![format!("checkpoint {a}, given {b}")],
    };
    Err(Error::ConfigMismatch(format!("{what} differs ({})", fields.join("; "))))
}

impl Checkpoint {
    pub fn expect_encoder(&self, config: &EncoderConfig) -> Result<()> {
        expect_same("encoder config", &self.meta.encoder, config)
    }

    /// Rebuilds the model and copies every stored parameter into it.
    pub fn build_model(&self) -> Result<DualEncoder> {
        let model = DualEncoder::new(self.meta.encoder.clone(), self.dtype, 0)?;
        let expected: Vec<&String> = model.params().names().collect();
        let stored: Vec<&String> = self.params.keys().collect();
        if expected != stored {
            let missing: Vec<_> = expected.iter().filter(|n| !self.params.contains_key(**n)).collect();
            return Err(Error::ConfigMismatch(format!(
                "checkpoint parameters do not match the encoder layout (missing {missing:?})"
            )));
        }
        for (name, t) in &self.params {
            model.params().assign(name, t).map_err(|e| Error::ConfigMismatch(e.to_string()))?;
        }
        Ok(model)
    }

    /// Like [`Self::build_model`] but first checks the encoder config.
    pub fn build_model_for(&self, config: &EncoderConfig) -> Result<DualEncoder> {
        self.expect_encoder(config)?;
        self.build_model()
    }
}
