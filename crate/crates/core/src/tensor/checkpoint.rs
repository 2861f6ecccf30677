//! DDCK checkpoint files.
//!
//! Layout, little-endian: `b"DDCK"`, `u32` version (1), `u32` header length,
//! a JSON header, then every block's values as `f32` in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DDCK";
const VERSION: u32 = 1;

/// One named `rows x cols` block of `f32` values.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

/// Decoded checkpoint: an architecture tag, free-form metadata and blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub meta: serde_json::Value,
    pub blocks: Vec<CheckpointBlock>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: String,
    meta: serde_json::Value,
    blocks: Vec<BlockHeader>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockHeader {
    name: String,
    shape: [usize; 2],
}

impl Checkpoint {
    /// Snapshot of a parameter set, narrowed to `f32`.
    pub fn from_params(arch: &str, meta: serde_json::Value, params: &ParameterSet) -> Self {
        let blocks = params
            .iter()
            .map(|(name, t)| CheckpointBlock {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                data: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect();
        Self {
            arch: arch.to_string(),
            meta,
            blocks,
        }
    }

    /// Copies block values into `params`, matching by name and shape.
    pub fn load_into(&self, params: &mut ParameterSet) -> Result<()> {
        if self.blocks.len() != params.len() {
            return Err(Error::Structural(format!(
                "checkpoint has {} blocks, model expects {}",
                self.blocks.len(),
                params.len()
            )));
        }
        let mut values = Vec::with_capacity(params.len());
        for id in params.ids() {
            let name = params.name(id);
            let block = self
                .blocks
                .iter()
                .find(|b| b.name == name)
                .ok_or_else(|| Error::Structural(format!("checkpoint lacks block {name}")))?;
            let data = block.data.iter().map(|&v| f64::from(v)).collect();
            values.push(Tensor::from_vec(block.rows, block.cols, data)?);
        }
        params.load_values(values)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            arch: self.arch.clone(),
            meta: self.meta.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockHeader {
                    name: b.name.clone(),
                    shape: [b.rows, b.cols],
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)
            .map_err(|e| Error::Structural(format!("checkpoint header: {e}")))?;
        let values: usize = self.blocks.iter().map(|b| b.data.len()).sum();
        let mut out = Vec::with_capacity(12 + json.len() + 4 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for b in &self.blocks {
            if b.data.len() != b.rows * b.cols {
                return Err(Error::Structural(format!(
                    "block {} holds {} values for shape {}x{}",
                    b.name,
                    b.data.len(),
                    b.rows,
                    b.cols
                )));
            }
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint; the message names what was wrong.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err("not a DDCK checkpoint".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[12..];
        if body.len() < hlen {
            return Err("truncated header".into());
        }
        let header: Header =
            serde_json::from_slice(&body[..hlen]).map_err(|e| format!("bad header: {e}"))?;
        let mut rest = &body[hlen..];
        let mut blocks = Vec::with_capacity(header.blocks.len());
        for bh in header.blocks {
            let n = bh.shape[0] * bh.shape[1];
            if rest.len() < 4 * n {
                return Err(format!("truncated block {}", bh.name));
            }
            let data = rest[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            rest = &rest[4 * n..];
            blocks.push(CheckpointBlock {
                name: bh.name,
                rows: bh.shape[0],
                cols: bh.shape[1],
                data,
            });
        }
        if !rest.is_empty() {
            return Err(format!("{} trailing bytes", rest.len()));
        }
        Ok(Self {
            arch: header.arch,
            meta: header.meta,
            blocks,
        })
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|msg| Error::format(path, msg))
}
