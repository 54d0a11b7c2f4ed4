//! Binary checkpoint format.
//!
//! ```text
//! "MLFA" | u32 version | u32 tensor count | u16 meta length   (14 bytes)
//! meta: UTF-8 JSON {epoch, train_config}, may be empty
//! per tensor: u16 name length | name | u8 rank | u32 dims... | f32 payload
//! u32 CRC32 of everything above
//! ```
//! All integers and floats are little-endian.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KwsError, Result};
use crate::params::ParamSet;
use crate::tape::Mat;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 4] = b"MLFA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub train_config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: Option<CheckpointMeta>,
    /// Values are exactly representable as `f32`.
    pub tensors: ParamSet,
}

impl Checkpoint {
    pub fn empty() -> Self {
        Self { version: VERSION, meta: None, tensors: ParamSet::new() }
    }

    /// Snapshot of `params`, rounded to `f32` storage precision.
    pub fn new(params: &ParamSet, meta: Option<CheckpointMeta>) -> Self {
        let mut tensors = params.clone();
        for (_, m) in tensors.iter_mut() {
            m.mapv_inplace(|x| x as f32 as f64);
        }
        Self { version: VERSION, meta, tensors }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = match &self.meta {
            Some(m) => serde_json::to_vec(m)?,
            None => Vec::new(),
        };
        let meta_len = u16::try_from(meta.len())
            .map_err(|_| KwsError::BadCheckpoint("metadata longer than 65535 bytes".into()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + 4 * self.tensors.param_count() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, m) in self.tensors.iter() {
            let name_len = u16::try_from(name.len())
                .map_err(|_| KwsError::BadCheckpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(2);
            out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
            for &x in m.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(KwsError::BadMagic);
        }
        if bytes.len() < HEADER_LEN + 4 {
            return Err(KwsError::BadCheckpoint("file truncated".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(KwsError::CrcMismatch { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(KwsError::VersionUnsupported(version));
        }
        let count = r.u32()? as usize;
        let meta_len = r.u16()? as usize;
        let meta_bytes = r.take(meta_len)?;
        let meta = if meta_len == 0 { None } else { Some(serde_json::from_slice(meta_bytes)?) };
        let mut tensors = ParamSet::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| KwsError::BadCheckpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.take(1)?[0];
            let (rows, cols) = match rank {
                1 => (1, r.u32()? as usize),
                2 => (r.u32()? as usize, r.u32()? as usize),
                _ => return Err(KwsError::BadCheckpoint(format!("{name}: unsupported rank {rank}"))),
            };
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| KwsError::BadCheckpoint(format!("{name}: shape overflow")))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| KwsError::BadCheckpoint("size overflow".into()))?)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            if tensors.get(&name).is_some() {
                return Err(KwsError::BadCheckpoint(format!("duplicate tensor {name}")));
            }
            tensors.insert(name, Mat::from_shape_vec((rows, cols), data).expect("checked size"));
        }
        if r.pos != body.len() {
            return Err(KwsError::BadCheckpoint(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { version, meta, tensors })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| KwsError::BadCheckpoint("file truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, c.to_bytes()?).map_err(|e| KwsError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| KwsError::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

pub fn total_param_count(c: &Checkpoint) -> usize {
    c.tensors.param_count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn empty_checkpoint_is_header_plus_crc() {
        let bytes = Checkpoint::empty().to_bytes().unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 4);
        assert_eq!(total_param_count(&Checkpoint::empty()), 0);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap(), Checkpoint::empty());
    }

    #[test]
    fn round_trip_and_corruption() {
        let mut p = ParamSet::new();
        p.insert("a", array![[1.0, -2.5], [0.1, 3.0]]);
        p.insert("b", array![[7.0]]);
        let meta = CheckpointMeta { epoch: 3, train_config: TrainConfig::default() };
        let c = Checkpoint::new(&p, Some(meta));
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensors.get("a").unwrap()[[1, 0]], 0.1f32 as f64);

        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n - 6] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(KwsError::CrcMismatch { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(KwsError::BadMagic)));
        assert!(Checkpoint::from_bytes(&bytes[..10]).is_err());
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut bytes = Checkpoint::empty().to_bytes().unwrap();
        bytes[4] = 9;
        let n = bytes.len();
        let crc = crc32fast::hash(&bytes[..n - 4]);
        bytes[n - 4..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(KwsError::VersionUnsupported(9))));
    }
}
