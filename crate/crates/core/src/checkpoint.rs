//! Checkpoint files: `DKCK`, u32 LE header length, JSON header, then one
//! tensor container per parameter in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{NetConfig, Params};
use crate::numerics::Tensor;
use crate::toydata::container::{decode_at, encode};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DKCK";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Denoiser,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub net: NetConfig,
    pub num_classes: usize,
    pub step: u64,
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    /// Free-form training metadata (balancing factor, schedule, resolution).
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Params<f32>,
}

impl Checkpoint {
    pub fn new(
        kind: ModelKind,
        net: NetConfig,
        num_classes: usize,
        step: u64,
        params: Params<f32>,
        extra: serde_json::Value,
    ) -> Self {
        let header = CheckpointHeader {
            kind,
            net,
            num_classes,
            step,
            names: params.names().to_vec(),
            shapes: params.tensors().iter().map(|t| t.shape().to_vec()).collect(),
            extra,
        };
        Self { header, params }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(8 + json.len() + self.params.num_scalars() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.tensors() {
            out.extend_from_slice(&encode(t));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format(bytes.len() as u64, "truncated checkpoint preamble"));
        }
        if bytes[..4] != CHECKPOINT_MAGIC[..] {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = 8usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::format(4, "header length exceeds file"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[8..body])
            .map_err(|e| Error::format(8, format!("bad checkpoint header: {e}")))?;
        if header.names.len() != header.shapes.len() {
            return Err(Error::format(8, "header names/shapes length mismatch"));
        }
        let mut pos = body;
        let mut entries = Vec::with_capacity(header.names.len());
        for (name, shape) in header.names.iter().zip(&header.shapes) {
            let (t, used): (Tensor<f32>, usize) = decode_at(&bytes[pos..], pos as u64)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(
                    pos as u64,
                    format!("parameter {name}: shape {:?}, header says {shape:?}", t.shape()),
                ));
            }
            entries.push((name.clone(), t));
            pos += used;
        }
        if pos != bytes.len() {
            return Err(Error::format(pos as u64, "trailing bytes after last parameter"));
        }
        Ok(Self {
            header,
            params: Params::from_named(entries),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::invalid(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.header.kind
            )));
        }
        Ok(())
    }
}
