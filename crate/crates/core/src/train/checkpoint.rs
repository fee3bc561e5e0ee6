//! Binary checkpoint, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "FXCK"
//! version    u32      1
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 JSON (model config, variant, LoRA, train config, epoch)
//! n_tensors  u32
//! per tensor:
//!   name_len u32, name (UTF-8), ndims u32, dims ndims × u64, values Π dims × f64
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::integration::IntegrationVariant;
use crate::model::{FixationFormer, LoraConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FXCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub variant: String,
    pub lora_rank: Option<usize>,
    pub lora_alpha: Option<f64>,
    pub train: Option<TrainConfig>,
    /// Epoch whose parameters are stored; 0 is the initialization.
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn capture(model: &FixationFormer, lora: Option<LoraConfig>, train: Option<TrainConfig>, epoch: usize) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config.clone(),
                variant: model.variant.as_str().to_string(),
                lora_rank: lora.map(|l| l.rank),
                lora_alpha: lora.map(|l| l.alpha),
                train,
                epoch,
            },
            tensors: model
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
        }
    }

    pub fn lora(&self) -> Option<LoraConfig> {
        match (self.meta.lora_rank, self.meta.lora_alpha) {
            (Some(rank), Some(alpha)) => Some(LoraConfig { rank, alpha }),
            _ => None,
        }
    }

    pub fn variant(&self) -> Result<IntegrationVariant> {
        self.meta.variant.parse()
    }

    /// Rebuilds the model and overwrites every parameter; names and shapes must match exactly.
    pub fn restore(&self) -> Result<FixationFormer> {
        let mut model = FixationFormer::new(&self.meta.model, self.variant()?, self.lora(), 0)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    pub fn load_into(&self, model: &mut FixationFormer) -> Result<()> {
        if self.tensors.len() != model.params.len() {
            return Err(Error::contract(format!(
                "checkpoint holds {} tensors, model has {} parameters",
                self.tensors.len(),
                model.params.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| Error::contract(format!("checkpoint tensor {name} has no matching parameter")))?;
            let p = model.params.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Dimension {
                    op: "checkpoint",
                    lhs: t.shape().to_vec(),
                    rhs: p.value.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.err("missing FXCK magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| r.err(&format!("bad metadata: {e}")))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("tensor name is not UTF-8"))?
                .to_string();
            let ndims = r.u32()? as usize;
            let dims = (0..ndims).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let data = r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(dims, data).map_err(|e| r.err(&e.to_string()))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last tensor"));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::format(self.path, format!("{msg} (offset {})", self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| self.err("truncated checkpoint"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
