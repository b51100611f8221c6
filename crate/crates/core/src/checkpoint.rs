//! Binary checkpoint container.
//!
//! Layout: `MOMACKPT`, format version (u32 LE), manifest length (u64 LE),
//! the JSON manifest, then every tensor's little-endian values in manifest
//! order. Optimizer moments are stored as tensors named `opt.m.<param>` and
//! `opt.v.<param>`; auxiliary routers keep their `aux.` names.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::balance::ComposerState;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;
use crate::train::RunConfig;

pub const MAGIC: &[u8; 8] = b"MOMACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Training state that travels with the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Optimizer updates applied under the current schedule.
    pub step: u64,
    /// Index of the next training batch.
    pub cursor: u64,
    /// Updates applied by the optimizer (bias-correction counter).
    pub opt_step: u64,
    pub cumulative_flops: f64,
    /// FLOPs spent before this schedule started (e.g. a seed stage).
    #[serde(default)]
    pub prior_flops: f64,
    /// Batch composer buffers when a mix policy is active.
    #[serde(default)]
    pub composer: Option<ComposerState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    dtype: DType,
    run: RunConfig,
    state: TrainState,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub run: RunConfig,
    pub state: TrainState,
    pub params: ParamStore<T>,
    pub opt_m: BTreeMap<String, Tensor<T>>,
    pub opt_v: BTreeMap<String, Tensor<T>>,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<T: Scalar> Checkpoint<T> {
    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        out.extend(self.opt_m.iter().map(|(k, v)| (format!("opt.m.{k}"), v)));
        out.extend(self.opt_v.iter().map(|(k, v)| (format!("opt.v.{k}"), v)));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.tensors();
        let manifest = Manifest {
            dtype: T::DTYPE,
            run: self.run.clone(),
            state: self.state.clone(),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let body: usize = tensors.iter().map(|(_, t)| t.numel()).sum::<usize>() * T::DTYPE.size_of();
        let mut out = Vec::with_capacity(20 + json.len() + body);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in tensors {
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(ckpt_err("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(ckpt_err(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let json = bytes
            .get(20..20 + len)
            .ok_or_else(|| ckpt_err("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| ckpt_err(format!("bad manifest: {e}")))?;
        if manifest.dtype != T::DTYPE {
            return Err(ckpt_err(format!(
                "checkpoint holds {:?} values, {:?} requested",
                manifest.dtype,
                T::DTYPE
            )));
        }
        let width = T::DTYPE.size_of();
        let mut pos = 20 + len;
        let mut params = ParamStore::new();
        let (mut opt_m, mut opt_v) = (BTreeMap::new(), BTreeMap::new());
        for entry in manifest.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(pos..pos + n * width)
                .ok_or_else(|| ckpt_err(format!("truncated tensor {}", entry.name)))?;
            pos += n * width;
            let data: Vec<T> = raw.chunks_exact(width).map(T::read_le).collect();
            let t = Tensor::new(entry.shape, data).map_err(|e| ckpt_err(e.to_string()))?;
            if let Some(k) = entry.name.strip_prefix("opt.m.") {
                opt_m.insert(k.to_string(), t);
            } else if let Some(k) = entry.name.strip_prefix("opt.v.") {
                opt_v.insert(k.to_string(), t);
            } else {
                params.insert(entry.name, t);
            }
        }
        if pos != bytes.len() {
            return Err(ckpt_err(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            run: manifest.run,
            state: manifest.state,
            params,
            opt_m,
            opt_v,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?)
            .map_err(|e| ckpt_err(format!("writing {}: {e}", path.display())))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| ckpt_err(format!("reading {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
