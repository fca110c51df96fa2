//! Binary checkpoint format.
//!
//! ```text
//! magic        8 bytes   "EARCKPT1"
//! version      u8        1
//! count        u32 LE    number of tensors
//! per tensor, in name order:
//!   name_len   u32 LE
//!   name       UTF-8
//!   rank       u32 LE
//!   dims       rank × u64 LE
//!   payload    numel × f64 LE
//! meta_len     u32 LE
//! meta         UTF-8 JSON: {"seed", "world_hash", "model", "config"}
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 8] = b"EARCKPT1";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub world_hash: String,
    pub model: ModelConfig,
    /// Free-form description of how the weights were produced.
    pub config: serde_json::Value,
}

pub fn encode(params: &ModelParams, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if &meta.model != params.config() {
        return Err(Error::Checkpoint(
            "metadata model config differs from the parameters".into(),
        ));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    let count = params.iter().count() as u32;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = serde_json::to_vec(meta)?;
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ModelParams, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.take(1)?[0];
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Checkpoint(format!("tensor `{name}` has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        let payload = r.take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        tensors.insert(name, t);
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after metadata".into()));
    }
    let params = ModelParams::from_parts(meta.model.clone(), tensors)?;
    Ok((params, meta))
}

pub fn save(path: &Path, params: &ModelParams, meta: &CheckpointMeta) -> Result<()> {
    let bytes = encode(params, meta)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelParams, CheckpointMeta)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Vocab;
    use crate::world::SyntheticWorld;

    fn sample() -> (ModelParams, CheckpointMeta) {
        let world = SyntheticWorld::new(0);
        let vocab = Vocab::from_world(&world);
        let params = ModelParams::init(ModelConfig::for_vocab(&vocab, 8)).unwrap();
        let meta = CheckpointMeta {
            seed: 8,
            world_hash: world.hash(),
            model: params.config().clone(),
            config: serde_json::json!({"stage": "init"}),
        };
        (params, meta)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (params, meta) = sample();
        let bytes = encode(&params, &meta).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(bytes[8], VERSION);
        let (back, meta2) = decode(&bytes).unwrap();
        assert!(back.bit_equal(&params));
        assert_eq!(meta, meta2);
        assert_eq!(encode(&back, &meta2).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let (params, meta) = sample();
        let bytes = encode(&params, &meta).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[8] = 2;
        assert!(decode(&bad).unwrap_err().to_string().contains("version"));
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
