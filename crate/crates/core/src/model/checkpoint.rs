//! Binary checkpoint layout:
//!
//! ```text
//! magic (8 bytes) | version u32 LE | header length u32 LE | JSON header
//! | f32 LE blobs: parameters, then Adam first and second moments if present
//! ```

use super::{param_infos, DenoiserConfig, DenoiserModel, ParamInfo};
use crate::error::{Error, Result};
use crate::numerics::{AdamParams, AdamState, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ERADIFF\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub adam: AdamParams,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub model: DenoiserConfig,
    pub seed: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
    /// Hash of the run configuration that produced the weights.
    pub config_hash: String,
    /// Free-form run configuration, stored for provenance.
    pub run_config: serde_json::Value,
    pub tensors: Vec<ParamInfo>,
    pub optimizer: Option<OptimizerHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<Tensor<f32>>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn new(
        model: &DenoiserModel<f32>,
        seed: u64,
        config_hash: String,
        run_config: serde_json::Value,
        adam: Option<AdamState<f32>>,
    ) -> Self {
        let step = adam.as_ref().map_or(0, |a| a.step);
        Self {
            header: CheckpointHeader {
                model: *model.config(),
                seed,
                step,
                config_hash,
                run_config,
                tensors: model.param_infos().to_vec(),
                optimizer: adam.as_ref().map(|a| OptimizerHeader {
                    adam: a.params,
                    step: a.step,
                }),
            },
            params: model.params().to_vec(),
            adam,
        }
    }

    /// Rebuilds the model the weights belong to.
    pub fn model(&self) -> Result<DenoiserModel<f32>> {
        let mut m = super::build_denoiser::<f32>(&self.header.model, self.header.seed)?;
        m.load_params(self.params.clone())?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let mut blobs: Vec<&Tensor<f32>> = self.params.iter().collect();
        if let Some(a) = &self.adam {
            blobs.extend(a.m.iter());
            blobs.extend(a.v.iter());
        }
        for t in blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint. With `expected`, the stored model config must
    /// match it exactly.
    pub fn from_bytes(bytes: &[u8], expected: Option<&DenoiserConfig>) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if let Some(cfg) = expected {
            if *cfg != header.model {
                return Err(Error::Checkpoint(format!(
                    "model config mismatch: file has {:?}, expected {:?}",
                    header.model, cfg
                )));
            }
        }
        header.model.validate()?;
        if header.tensors != param_infos(&header.model) {
            return Err(bad("tensor table does not match the model config"));
        }

        let mut cursor = &bytes[16 + hlen..];
        let mut read = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if cursor.len() < 4 * n {
                return Err(bad("truncated weight data"));
            }
            let (head, rest) = cursor.split_at(4 * n);
            cursor = rest;
            let data = head
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Tensor::new(shape.to_vec(), data)
        };
        let params = header
            .tensors
            .iter()
            .map(|i| read(&i.shape))
            .collect::<Result<Vec<_>>>()?;
        let adam = match &header.optimizer {
            None => None,
            Some(o) => {
                let m = header.tensors.iter().map(|i| read(&i.shape)).collect::<Result<Vec<_>>>()?;
                let v = header.tensors.iter().map(|i| read(&i.shape)).collect::<Result<Vec<_>>>()?;
                Some(AdamState {
                    params: o.adam,
                    step: o.step,
                    m,
                    v,
                })
            }
        };
        if !cursor.is_empty() {
            return Err(bad("trailing bytes after weight data"));
        }
        Ok(Self { header, params, adam })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&DenoiserConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, expected)
}
