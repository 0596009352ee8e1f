//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DYNMARL\x01"
//! version  u32
//! meta     u64 length + UTF-8 JSON
//! count    u64
//! tensor   u32 name length, name, u32 rank, rank x u64 dims, f64 data
//! ```
//!
//! The JSON metadata is kept as the exact text that was written, so decoding
//! and re-encoding reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{NetConfig, NetError, NetworkBundle, ParamEntry, ParamGroup, ParameterRegistry};
use crate::diffcore::Tensor;
use crate::roster::Roster;

const MAGIC: &[u8; 8] = b"DYNMARL\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("metadata: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Net(#[from] NetError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// JSON metadata text.
    pub meta: String,
    pub tensors: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated(self.pos))?;
        let out = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated(self.pos))?;
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::Malformed("length overflow".into()))
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u64).to_le_bytes());
        out.extend_from_slice(self.meta.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
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

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let meta_len = r.len()?;
        let meta = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?
            .to_string();
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len()?);
            }
            let len: usize = shape.iter().product();
            let raw = r.take(len.checked_mul(8).ok_or(CheckpointError::Truncated(r.pos))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self { meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::decode(&fs::read(path)?)
    }

    pub fn tensor_map(&self) -> BTreeMap<&str, &Tensor> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }
}

/// Bundle description stored in checkpoint metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub net: NetConfig,
    pub roster: Roster,
    pub groups: BTreeMap<String, ParamGroup>,
}

/// Metadata and tensors (`online/<name>`, `target/<name>`) describing `bundle`.
pub fn bundle_parts(bundle: &NetworkBundle) -> (BundleMeta, Vec<(String, Tensor)>) {
    let mut tensors = Vec::new();
    let mut groups = BTreeMap::new();
    for (name, e) in bundle.params().iter() {
        groups.insert(name.clone(), e.group);
        tensors.push((format!("online/{name}"), e.online.clone()));
        tensors.push((format!("target/{name}"), e.target.clone()));
    }
    let meta = BundleMeta {
        net: bundle.config().clone(),
        roster: bundle.roster().clone(),
        groups,
    };
    (meta, tensors)
}

pub fn bundle_from_parts(meta: &BundleMeta, tensors: &BTreeMap<&str, &Tensor>) -> Result<NetworkBundle, CheckpointError> {
    let mut params = ParameterRegistry::new();
    for (name, group) in &meta.groups {
        let fetch = |prefix: &str| {
            tensors
                .get(format!("{prefix}/{name}").as_str())
                .map(|t| (*t).clone())
                .ok_or_else(|| CheckpointError::Malformed(format!("missing {prefix}/{name}")))
        };
        let online = fetch("online")?;
        let target = fetch("target")?;
        if online.shape() != target.shape() {
            return Err(CheckpointError::Malformed(format!("{name}: target shape differs")));
        }
        params.insert_entry(
            name.clone(),
            ParamEntry {
                online,
                target,
                group: *group,
            },
        );
    }
    Ok(NetworkBundle::from_parts(meta.net.clone(), params, meta.roster.clone())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(Checkpoint::decode(b"nonsense-bytes"), Err(CheckpointError::BadMagic)));
        let ck = Checkpoint {
            meta: "{}".into(),
            tensors: vec![("w".into(), Tensor::vector(&[1.0, 2.0]).unwrap())],
        };
        let bytes = ck.encode();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
        assert_eq!(Checkpoint::decode(&bytes).unwrap(), ck);
    }
}
