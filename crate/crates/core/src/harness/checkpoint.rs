//! `VQLT` checkpoint container. Little-endian:
//!
//! ```text
//! "VQLT" | version u32 | config len u32, config utf-8 | entry count u32
//! per entry: name len u16, name utf-8, dtype u8 (0 = f64), rank u8,
//!            rank x dim u32, values f64
//! CRC32 of everything above
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::numerics::Array;

pub const MAGIC: &[u8; 4] = b"VQLT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint lacks entry {0}")]
    Missing(String),
}

/// Config snapshot plus named arrays in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub entries: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn new(config: String) -> Self {
        Checkpoint { config, entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        let name = name.into();
        debug_assert!(self.get(&name).is_none(), "duplicate entry {name}");
        self.entries.push((name, value));
    }

    pub fn insert_scalars(&mut self, name: impl Into<String>, values: &[f64]) {
        self.insert(name, Array::from_vec(values.to_vec()));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&Array, CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let too_big = |what: &str| CheckpointError::Malformed(format!("{what} too large"));
        out.extend_from_slice(&u32::try_from(self.config.len()).map_err(|_| too_big("config"))?.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&u32::try_from(self.entries.len()).map_err(|_| too_big("entry count"))?.to_le_bytes());
        for (name, a) in &self.entries {
            out.extend_from_slice(&u16::try_from(name.len()).map_err(|_| too_big("name"))?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            out.push(u8::try_from(a.rank()).map_err(|_| too_big("rank"))?);
            for &d in a.shape() {
                out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("dimension"))?.to_le_bytes());
            }
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// Magic and version are checked first, then the checksum, then the
    /// structure; a truncated file therefore reports a checksum error.
    pub fn from_bytes(buf: &[u8]) -> Result<Self, CheckpointError> {
        if buf.len() < 4 || &buf[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if buf.len() < 8 {
            return Err(CheckpointError::Checksum);
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        if buf.len() < 12 {
            return Err(CheckpointError::Checksum);
        }
        let body = &buf[..buf.len() - 4];
        let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(CheckpointError::Checksum);
        }
        let mut pos = 8;
        let mut take = |n: usize| -> Result<&[u8], CheckpointError> {
            let end = pos + n;
            if end > body.len() {
                return Err(CheckpointError::Malformed("entry runs past the end".into()));
            }
            let s = &body[pos..end];
            pos = end;
            Ok(s)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let clen = u32_at(take(4)?);
        let config = String::from_utf8(take(clen)?.to_vec())
            .map_err(|_| CheckpointError::Malformed("config is not utf-8".into()))?;
        let count = u32_at(take(4)?);
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let nlen = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(nlen)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("entry name is not utf-8".into()))?;
            let dtype = take(1)?[0];
            if dtype != 0 {
                return Err(CheckpointError::Malformed(format!("unknown dtype {dtype} for {name}")));
            }
            let rank = take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(take(4)?));
            }
            let count: usize = shape.iter().product();
            let raw = take(count.checked_mul(8).ok_or_else(|| CheckpointError::Malformed("size overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            let a = Array::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            entries.push((name, a));
        }
        if pos != body.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint { config, entries })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    /// The serialized form's checksum, used to tie a second-stage checkpoint
    /// to its first stage. Hashing the whole file instead would always give
    /// the same CRC residue, because the file ends in its own CRC.
    pub fn fingerprint(&self) -> Result<u32, CheckpointError> {
        let bytes = self.to_bytes()?;
        Ok(crc32fast::hash(&bytes[..bytes.len() - 4]))
    }
}
