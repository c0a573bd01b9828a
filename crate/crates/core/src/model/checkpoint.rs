//! Versioned binary checkpoints.
//!
//! ```text
//! "MICO1"
//! u32 meta_len | meta JSON (model config plus training metadata)
//! u32 tensor count
//! per tensor: u32 name_len | name | u32 rank | u32 dims.. | f64 values (LE, row-major)
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MicoConfig, MicoModel};
use crate::error::{MicoError, Result};
use crate::losses::SurvivalBins;
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"MICO1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: MicoConfig,
    pub fold: Option<usize>,
    pub best_epoch: Option<usize>,
    pub survival_bins: Option<SurvivalBins>,
    /// Bag ids of the held-out test split the checkpoint was scored on.
    #[serde(default)]
    pub test_bag_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamSet,
}

impl Checkpoint {
    pub fn from_model(model: &MicoModel) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                config: model.config.clone(),
                fold: None,
                best_epoch: None,
                survival_bins: None,
                test_bag_ids: Vec::new(),
            },
            params: model.params.clone(),
        }
    }

    pub fn model(&self) -> Result<MicoModel> {
        self.meta.config.validate()?;
        Ok(MicoModel {
            config: self.meta.config.clone(),
            params: self.params.clone(),
        })
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(meta.len() + 16 + self.params.numel() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(MicoError::CorruptHeader("missing MICO1 magic".into()));
        }
        let mut pos = CHECKPOINT_MAGIC.len();
        let mut take = |n: usize| -> Result<&[u8]> {
            let left = bytes.len() - pos;
            if left < n {
                return Err(MicoError::Truncated { expected: n, found: left });
            }
            let s = &bytes[pos..pos + n];
            pos += n;
            Ok(s)
        };
        let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().unwrap()) as usize;

        let meta_len = u32_at(take(4)?);
        let meta: CheckpointMeta = serde_json::from_slice(take(meta_len)?)
            .map_err(|e| MicoError::CorruptHeader(format!("checkpoint metadata: {e}")))?;
        let count = u32_at(take(4)?);
        let mut params = ParamSet::new();
        for _ in 0..count {
            let name_len = u32_at(take(4)?);
            if name_len > 1024 {
                return Err(MicoError::CorruptHeader(format!("tensor name length {name_len}")));
            }
            let name = String::from_utf8(take(name_len)?.to_vec())
                .map_err(|_| MicoError::CorruptHeader("tensor name is not utf-8".into()))?;
            let rank = u32_at(take(4)?);
            if rank > 8 {
                return Err(MicoError::CorruptHeader(format!("tensor `{name}` has rank {rank}")));
            }
            let shape = (0..rank).map(|_| Ok(u32_at(take(4)?))).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| MicoError::CorruptHeader(format!("tensor `{name}` shape {shape:?}")))?;
            let raw = take(n.checked_mul(8).ok_or_else(|| MicoError::CorruptHeader("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            params.insert(name, Tensor::new(shape, data)?);
        }
        if pos != bytes.len() {
            return Err(MicoError::CorruptHeader(format!("{} trailing bytes", bytes.len() - pos)));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}
