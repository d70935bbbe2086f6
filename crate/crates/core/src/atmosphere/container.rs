//! `TCDS` dataset container. Little-endian throughout:
//!
//! ```text
//! "TCDS" | version u32 | storm count u32
//! per storm: id len u16, id utf-8, steps u32, C u16, H u16, W u16,
//!            C x (name len u8, name, level f32),
//!            steps x (msw f64, mslp f64, C*H*W f64)
//! CRC32 of everything above
//! ```

use std::fs;
use std::io;
use std::path::Path;
use std::sync::Arc;

use thiserror::Error;

use super::{ChannelSpec, FieldCube, IntensityRecord, Level, Storm, Variable};
use crate::numerics::Array;

pub const MAGIC: &[u8; 4] = b"TCDS";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a dataset container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("container truncated while reading {0}")]
    Truncated(&'static str),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed container: {0}")]
    Malformed(String),
}

fn put_u16(out: &mut Vec<u8>, v: usize, what: &str) -> Result<(), ContainerError> {
    let v = u16::try_from(v).map_err(|_| ContainerError::Malformed(format!("{what} {v} exceeds u16")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_dataset_bytes(storms: &[Storm]) -> Result<Vec<u8>, ContainerError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(storms.len()).map_err(|_| ContainerError::Malformed("too many storms".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for s in storms {
        if s.records.len() != s.cubes.len() {
            return Err(ContainerError::Malformed(format!("storm {} has unaligned records and cubes", s.id)));
        }
        put_u16(&mut out, s.id.len(), "id length")?;
        out.extend_from_slice(s.id.as_bytes());
        let steps = u32::try_from(s.len()).map_err(|_| ContainerError::Malformed("too many steps".into()))?;
        out.extend_from_slice(&steps.to_le_bytes());
        let (h, w) = s.cubes.first().map_or((0, 0), |c| (c.height(), c.width()));
        put_u16(&mut out, s.channels.len(), "channel count")?;
        put_u16(&mut out, h, "height")?;
        put_u16(&mut out, w, "width")?;
        for c in s.channels.iter() {
            let name = c.variable.name();
            out.push(name.len() as u8);
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&c.level_code().to_le_bytes());
        }
        for (r, cube) in s.records.iter().zip(&s.cubes) {
            if *cube.channels != *s.channels || cube.height() != h || cube.width() != w {
                return Err(ContainerError::Malformed(format!("storm {} mixes cube layouts", s.id)));
            }
            out.extend_from_slice(&r.msw.to_le_bytes());
            out.extend_from_slice(&r.mslp.to_le_bytes());
            for v in cube.grid.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn write_dataset(path: &Path, storms: &[Storm]) -> Result<(), ContainerError> {
    fs::write(path, write_dataset_bytes(storms)?)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(ContainerError::Truncated(what))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, ContainerError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<usize, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()) as usize)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &'static str) -> Result<f32, ContainerError> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, ContainerError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn parse_channel(name: &str, level: f32) -> Result<ChannelSpec, ContainerError> {
    let variable =
        Variable::from_name(name).ok_or_else(|| ContainerError::Malformed(format!("unknown variable {name:?}")))?;
    let spec = if level == 0.0 {
        ChannelSpec::surface(variable)
    } else if level > 0.0 && level.fract() == 0.0 && level <= u32::MAX as f32 {
        ChannelSpec { variable, level: Level::Pressure(level as u32) }
    } else {
        return Err(ContainerError::Malformed(format!("bad level {level}")));
    };
    spec.validate().map_err(ContainerError::Malformed)?;
    Ok(spec)
}

/// Parse a container. Magic and version are checked first, then the
/// structure, then the checksum.
pub fn read_dataset_bytes(buf: &[u8]) -> Result<Vec<Storm>, ContainerError> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let mut r = Reader { buf, pos: 4 };
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(ContainerError::Version(version));
    }
    let count = r.u32("storm count")? as usize;
    let mut storms = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id_len = r.u16("storm id")?;
        let id = std::str::from_utf8(r.take(id_len, "storm id")?)
            .map_err(|_| ContainerError::Malformed("storm id is not utf-8".into()))?;
        let id: Arc<str> = Arc::from(id);
        let steps = r.u32("step count")? as usize;
        let c = r.u16("channel count")?;
        let h = r.u16("height")?;
        let w = r.u16("width")?;
        let mut channels = Vec::with_capacity(c);
        for _ in 0..c {
            let n = r.u8("channel name")? as usize;
            let name = std::str::from_utf8(r.take(n, "channel name")?)
                .map_err(|_| ContainerError::Malformed("channel name is not utf-8".into()))?;
            let level = r.f32("channel level")?;
            channels.push(parse_channel(name, level)?);
        }
        let channels: Arc<[ChannelSpec]> = channels.into();
        if steps > 0 && (c == 0 || h == 0 || h != w) {
            return Err(ContainerError::Malformed(format!("bad cube extents {c}x{h}x{w}")));
        }
        let cells = c * h * w;
        let mut records = Vec::with_capacity(steps.min(1 << 16));
        let mut cubes = Vec::with_capacity(steps.min(1 << 16));
        for step in 0..steps {
            let msw = r.f64("msw")?;
            let mslp = r.f64("mslp")?;
            let raw = r.take(cells * 8, "grid")?;
            let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            let grid = Array::new(vec![c, h, w], data).map_err(|e| ContainerError::Malformed(e.to_string()))?;
            records.push(IntensityRecord { msw, mslp, valid_time: step as i64, storm_id: Arc::clone(&id) });
            cubes.push(FieldCube { channels: Arc::clone(&channels), grid, center: None, resolution_deg: None });
        }
        storms.push(Storm { id, channels, records, cubes });
    }
    let body_end = r.pos;
    let stored = r.u32("checksum")?;
    if r.pos != buf.len() {
        return Err(ContainerError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    let computed = crc32fast::hash(&buf[..body_end]);
    if stored != computed {
        return Err(ContainerError::Checksum { stored, computed });
    }
    Ok(storms)
}

pub fn read_dataset(path: &Path) -> Result<Vec<Storm>, ContainerError> {
    read_dataset_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::atmosphere::{synth_dataset, SynthParams};

    fn sample() -> Vec<Storm> {
        let p = SynthParams { min_life: 3, max_life: 5, grid: 8, ..SynthParams::default() };
        synth_dataset(3, &p, 4).unwrap()
    }

    #[test]
    fn round_trip() {
        let storms = sample();
        let bytes = write_dataset_bytes(&storms).unwrap();
        assert_eq!(read_dataset_bytes(&bytes).unwrap(), storms);
    }

    #[test]
    fn empty_list() {
        let bytes = write_dataset_bytes(&[]).unwrap();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[8..12], &[0, 0, 0, 0]);
        assert!(read_dataset_bytes(&bytes).unwrap().is_empty());
    }

    #[test]
    fn distinct_error_kinds() {
        let bytes = write_dataset_bytes(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_dataset_bytes(&bad), Err(ContainerError::BadMagic)));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(read_dataset_bytes(&bad), Err(ContainerError::Version(9))));
        assert!(matches!(read_dataset_bytes(&bytes[..bytes.len() - 100]), Err(ContainerError::Truncated(_))));
        let mut bad = bytes.clone();
        let mid = bytes.len() - 40;
        bad[mid] ^= 0x10;
        assert!(matches!(read_dataset_bytes(&bad), Err(ContainerError::Checksum { .. })));
    }
}
