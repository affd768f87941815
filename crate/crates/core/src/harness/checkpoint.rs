//! Checkpoint files.
//!
//! ```text
//! magic       4 bytes  "BCK1"
//! header_len  u32 LE
//! header      JSON (CheckpointHeader)
//! blocks      f32 LE, in BLOCK_NAMES order, lengths listed in the header
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::TaxonLevel;
use crate::model::{ModelDims, ModelParams, ParamBlocks, BLOCK_NAMES};
use crate::train::{Phase, PhaseConfig};

pub const MAGIC: &[u8; 4] = b"BCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub dims: ModelDims,
    pub classes: Vec<String>,
    pub label_level: TaxonLevel,
    /// Phases completed so far, in order.
    pub phases: Vec<Phase>,
    pub seed: u64,
    pub steps: u64,
    pub config: Option<PhaseConfig>,
    pub blocks: Vec<BlockInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(
        params: ModelParams,
        classes: Vec<String>,
        label_level: TaxonLevel,
        phases: Vec<Phase>,
        seed: u64,
        steps: u64,
        config: Option<PhaseConfig>,
    ) -> Self {
        let blocks = BLOCK_NAMES
            .iter()
            .zip(params.blocks.as_slices())
            .map(|(n, b)| BlockInfo { name: n.to_string(), len: b.len() })
            .collect();
        Self {
            header: CheckpointHeader {
                dims: params.dims,
                classes,
                label_level,
                phases,
                seed,
                steps,
                config,
                blocks,
            },
            params,
        }
    }

    pub fn last_phase(&self) -> Option<Phase> {
        self.header.phases.last().copied()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for block in self.params.blocks.as_slices() {
            for &v in block {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 || &buf[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let hlen = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let body = buf
            .get(8..8 + hlen)
            .ok_or_else(|| Error::Format("truncated checkpoint header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(body).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        header.dims.validate()?;
        if header.classes.len() != header.dims.num_classes {
            return Err(Error::Format(format!(
                "checkpoint lists {} classes for {} outputs",
                header.classes.len(),
                header.dims.num_classes
            )));
        }
        let payload = header.dims.param_count().and_then(|n| n.checked_mul(4));
        if payload != Some(buf.len() - 8 - hlen) {
            return Err(Error::Format("checkpoint payload size does not match its dims".into()));
        }
        let mut blocks = ParamBlocks::zeros(&header.dims);
        let expected: Vec<BlockInfo> = BLOCK_NAMES
            .iter()
            .zip(blocks.as_slices())
            .map(|(n, b)| BlockInfo { name: n.to_string(), len: b.len() })
            .collect();
        if expected != header.blocks {
            return Err(Error::Format("checkpoint block list does not match its dims".into()));
        }
        let mut pos = 8 + hlen;
        for block in blocks.as_mut_slices() {
            let n = block.len() * 4;
            let bytes = buf
                .get(pos..pos + n)
                .ok_or_else(|| Error::Format("truncated checkpoint payload".into()))?;
            for (dst, c) in block.iter_mut().zip(bytes.chunks_exact(4)) {
                *dst = f32::from_le_bytes(c.try_into().unwrap()) as f64;
            }
            pos += n;
        }
        if pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", buf.len() - pos)));
        }
        if !blocks.all_finite() {
            return Err(Error::Numeric("checkpoint contains non-finite parameters".into()));
        }
        let params = ModelParams::from_blocks(header.dims, blocks)?;
        Ok(Self { header, params })
    }

    /// Round the parameters through f32 so the in-memory model equals what a
    /// reload of the written file would produce.
    pub fn quantized(mut self) -> Self {
        for block in self.params.blocks.as_mut_slices() {
            block.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        self.params.touch();
        self
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<[u8; 32]> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256(&bytes))
    }

    /// Returns the checkpoint and the SHA-256 of the file bytes.
    pub fn read(path: impl AsRef<Path>) -> Result<(Self, [u8; 32])> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, sha256(&bytes)))
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}
