//! Binary checkpoint container.
//!
//! ```text
//! "KNLM" | version u32 | header_len u32 | header JSON (UTF-8)
//! n_tensors u32
//! per tensor: name_len u32 | name | ndim u32 | dims u32×ndim | f32×numel
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::{Params, Tensor};
use super::train::{EpochStats, TrainConfig};
use super::Transformer;
use crate::digest::{from_hex, sha256, to_hex, Digest};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"KNLM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Transformer,
    pub vocab_hash: Digest,
    pub step: u64,
    pub trace: Vec<EpochStats>,
    /// Free-form input hashes (e.g. corpus files) recorded by the caller.
    pub provenance: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    vocab_hash: String,
    step: u64,
    trace: Vec<EpochStats>,
    #[serde(default)]
    provenance: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&Header {
            config: self.config.clone(),
            vocab_hash: to_hex(&self.vocab_hash),
            step: self.step,
            trace: self.trace.clone(),
            provenance: self.provenance.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + self.model.params.num_scalars() * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let tensors = &self.model.params.tensors;
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &dim in &t.shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &x in &t.data {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = read_u32(&mut r, "header length")? as usize;
        let header_bytes = read_vec(&mut r, header_len, "header")?;
        let header: Header = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Corrupt(format!("checkpoint header: {e}")))?;
        let vocab_hash = from_hex(&header.vocab_hash)
            .ok_or_else(|| Error::Corrupt("checkpoint vocab hash".into()))?;

        let n = read_u32(&mut r, "tensor count")? as usize;
        let expected = Params::zeros(&header.config.model_config());
        if n != expected.tensors.len() {
            return Err(Error::Corrupt(format!(
                "checkpoint holds {n} tensors, config implies {}",
                expected.tensors.len()
            )));
        }
        let mut tensors = Vec::with_capacity(n);
        for want in &expected.tensors {
            let name_len = read_u32(&mut r, "tensor name length")? as usize;
            let name = String::from_utf8(read_vec(&mut r, name_len, "tensor name")?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r, "tensor rank")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r, "tensor dim")? as usize);
            }
            if name != want.name || shape != want.shape {
                return Err(Error::Corrupt(format!(
                    "tensor {name:?} {shape:?} does not match expected {:?} {:?}",
                    want.name, want.shape
                )));
            }
            let numel: usize = shape.iter().product();
            let raw = read_vec(&mut r, numel * 4, "tensor data")?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::Corrupt("trailing bytes after checkpoint".into()));
        }
        let model = Transformer::from_params(header.config.model_config(), Params { tensors })?;
        Ok(Self {
            config: header.config,
            model,
            vocab_hash,
            step: header.step,
            trace: header.trace,
            provenance: header.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<Digest> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes)?;
        Ok(sha256(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Hash of the serialized bytes; identifies the checkpoint downstream.
    pub fn content_hash(&self) -> Result<Digest> {
        Ok(sha256(&self.to_bytes()?))
    }
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Corrupt(format!("truncated checkpoint while reading {what}")))
}

fn read_u32(r: &mut Cursor<&[u8]>, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_vec(r: &mut Cursor<&[u8]>, len: usize, what: &str) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(Error::Corrupt(format!(
            "truncated checkpoint while reading {what}"
        )));
    }
    let mut v = vec![0u8; len];
    read_exact(r, &mut v, what)?;
    Ok(v)
}
