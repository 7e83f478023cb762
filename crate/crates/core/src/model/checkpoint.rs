//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "MOBVAMC\0"
//! version    u32       1
//! hdr_len    u32       length of the JSON header in bytes
//! header     hdr_len   JSON: {"config": ModelConfig, "temporal_dim", "spatial_dim",
//!                             "tensors": [{"name", "rows", "cols"}, ...]}
//! n_params   u64
//! params     n_params x f64, tensors concatenated in header order, each row-major
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ClusterModel, Layout, ModelConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MOBVAMC\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    temporal_dim: usize,
    spatial_dim: usize,
    tensors: Vec<TensorInfo>,
}

fn io(e: std::io::Error) -> Error {
    Error::io("model checkpoint", e)
}

pub fn write_checkpoint<W: Write>(model: &ClusterModel, mut sink: W) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        temporal_dim: model.layout.temporal_dim,
        spatial_dim: model.layout.spatial_dim,
        tensors: model
            .layout
            .groups()
            .into_iter()
            .map(|(name, _, (rows, cols))| TensorInfo { name: name.into(), rows, cols })
            .collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Parse(e.to_string()))?;
    let mut buf = Vec::with_capacity(24 + header.len() + 8 * model.params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    sink.write_all(&buf).map_err(io)
}

pub fn read_checkpoint<R: Read>(mut source: R) -> Result<ClusterModel> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes).map_err(io)?;
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(at..at + n).ok_or_else(|| Error::Parse("checkpoint truncated".into()))?;
        at += n;
        Ok(s)
    };
    if take(8)? != MAGIC {
        return Err(Error::Parse("not a model checkpoint".into()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
    }
    let hdr_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let header: Header = serde_json::from_slice(take(hdr_len)?).map_err(|e| Error::Parse(format!("checkpoint header: {e}")))?;
    let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
    let cfg = &header.config;
    let layout = Layout::new(header.temporal_dim, header.spatial_dim, cfg.hidden, cfg.latent, cfg.k);
    if n != layout.total {
        return Err(Error::Parse(format!("checkpoint holds {n} parameters, layout expects {}", layout.total)));
    }
    let shapes_match = layout
        .groups()
        .iter()
        .zip(&header.tensors)
        .all(|((name, _, (r, c)), t)| *name == t.name && *r == t.rows && *c == t.cols);
    if !shapes_match || header.tensors.len() != layout.groups().len() {
        return Err(Error::Parse("checkpoint tensor table does not match the model layout".into()));
    }
    let raw = take(8 * n)?;
    let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(ClusterModel { config: header.config, layout, params })
}
