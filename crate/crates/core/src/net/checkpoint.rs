//! Parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "UNETCKPT"
//! offset 8   u32       format version (1)
//! offset 12  u32       header length H in bytes
//! offset 16  H bytes   UTF-8 JSON header:
//!                      {"config": UNetConfig, "seed": u64, "epoch": usize,
//!                       "tensors": [{"name": str, "shape": [usize]}, ...]}
//! offset 16+H          f32 LE values of each tensor, in header order
//! ```
//!
//! Optimizer velocity is not stored; loading yields zero velocity.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::unet::{Layout, NetParams, UNetConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"UNETCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: UNetConfig,
    pub seed: u64,
    pub epoch: usize,
    pub params: NetParams<f32>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: UNetConfig,
    seed: u64,
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            tensors: self
                .params
                .specs
                .iter()
                .map(|s| TensorEntry {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 4 * self.params.count());
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).expect("vec write");
        out.write_u32::<LittleEndian>(json.len() as u32)
            .expect("vec write");
        out.extend_from_slice(&json);
        for t in &self.params.tensors {
            for &v in t {
                out.write_f32::<LittleEndian>(v).expect("vec write");
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing checkpoint magic"));
        }
        let mut cur = &bytes[8..];
        let version = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated header"))?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = cur
            .read_u32::<LittleEndian>()
            .map_err(|_| bad("truncated header"))? as usize;
        if cur.len() < hlen {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&cur[..hlen])
            .map_err(|e| Error::Checkpoint(format!("invalid header: {e}")))?;
        let mut cur = &cur[hlen..];
        let layout = Layout::new(&header.config)?;
        let specs = layout.specs();
        if specs.len() != header.tensors.len()
            || specs
                .iter()
                .zip(&header.tensors)
                .any(|(s, t)| s.name != t.name || s.shape != t.shape)
        {
            return Err(bad("tensor list does not match the stored configuration"));
        }
        let mut params = NetParams::<f32>::zeros(&layout);
        for t in params.tensors.iter_mut() {
            cur.read_f32_into::<LittleEndian>(t)
                .map_err(|_| bad("truncated tensor data"))?;
        }
        if !cur.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", cur.len())));
        }
        if !params.all_finite() {
            return Err(bad("non-finite parameter value"));
        }
        Ok(Checkpoint {
            config: header.config,
            seed: header.seed,
            epoch: header.epoch,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
