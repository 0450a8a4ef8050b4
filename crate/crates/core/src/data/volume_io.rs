//! Single-volume file format (little-endian):
//!
//! ```text
//! magic     12 bytes "DVOXVOLUME\0\0"
//! version   u32      1
//! dims      5 × u32  (N, C, D, H, W) with N = C = 1
//! label     u8       0 or 1
//! id        u32 length + UTF-8 bytes
//! crc32     u32      over all preceding header bytes
//! payload   D·H·W × f32
//! ```

use std::path::Path;

use super::VolumeSample;
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor5};

pub const VOLUME_MAGIC: &[u8; 12] = b"DVOXVOLUME\0\0";
pub const VOLUME_VERSION: u32 = 1;
const MAX_ID_LEN: usize = 4096;

pub fn encode_volume(v: &VolumeSample) -> Result<Vec<u8>> {
    let shape = v.volume.shape();
    if shape.n() != 1 || shape.c() != 1 {
        return Err(Error::Format(format!("volume must have shape (1, 1, D, H, W), got {shape}")));
    }
    if v.label > 1 {
        return Err(Error::Data(format!("label {} is not 0 or 1", v.label)));
    }
    if v.subject_id.len() > MAX_ID_LEN {
        return Err(Error::Format(format!("subject id longer than {MAX_ID_LEN} bytes")));
    }
    let mut w = Writer::default();
    w.bytes(VOLUME_MAGIC);
    w.u32(VOLUME_VERSION);
    for d in shape.0 {
        w.u32(u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?);
    }
    w.u8(v.label);
    w.u32(v.subject_id.len() as u32);
    w.bytes(v.subject_id.as_bytes());
    let crc = crc32fast::hash(&w.buf);
    w.u32(crc);
    w.f32s(v.volume.data());
    Ok(w.buf)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeSample> {
    let mut r = Reader::new(bytes);
    if r.take(VOLUME_MAGIC.len(), "magic")? != VOLUME_MAGIC {
        return Err(Error::Format("not a volume file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VOLUME_VERSION {
        return Err(Error::Format(format!("volume version {version}, expected {VOLUME_VERSION}")));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32("dims")? as usize;
    }
    let shape = Shape(dims);
    if shape.n() != 1 || shape.c() != 1 {
        return Err(Error::Format(format!("dim mismatch: volume header declares {shape}")));
    }
    let label = r.u8("label")?;
    let id_len = r.u32("id length")? as usize;
    if id_len > MAX_ID_LEN {
        return Err(Error::Format(format!("id length {id_len} exceeds {MAX_ID_LEN}")));
    }
    let id = r.take(id_len, "subject id")?;
    let header_len = bytes.len() - r.remaining();
    let stored = r.u32("header checksum")?;
    if crc32fast::hash(&bytes[..header_len]) != stored {
        return Err(Error::Format("volume header checksum mismatch".into()));
    }
    if label > 1 {
        return Err(Error::Format(format!("label {label} is not 0 or 1")));
    }
    let subject_id = String::from_utf8(id.to_vec()).map_err(|_| Error::Format("subject id is not UTF-8".into()))?;
    let numel = shape
        .checked_numel()
        .ok_or_else(|| Error::Format(format!("extents of {shape} overflow")))?;
    if numel.checked_mul(4) != Some(r.remaining()) {
        return Err(Error::Format(format!(
            "payload size: header declares {numel} floats, file carries {} bytes",
            r.remaining()
        )));
    }
    let data = r.reals::<f32>(numel, 4, "payload")?;
    Ok(VolumeSample {
        volume: Tensor5::from_vec(shape, data)?,
        label,
        subject_id,
    })
}

pub fn write_volume(path: &Path, v: &VolumeSample) -> Result<()> {
    std::fs::write(path, encode_volume(v)?).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<VolumeSample> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}
