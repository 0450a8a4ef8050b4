//! Little-endian cursor helpers shared by the checkpoint and volume formats.

use crate::error::{Error, Result};
use crate::tensor::Real;

#[derive(Default)]
pub(crate) struct Writer {
    pub buf: Vec<u8>,
}

impl Writer {
    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    pub fn f32s(&mut self, v: &[f32]) {
        self.buf.reserve(v.len() * 4);
        v.iter().for_each(|x| self.bytes(&x.to_le_bytes()));
    }
    pub fn f64s(&mut self, v: &[f64]) {
        self.buf.reserve(v.len() * 8);
        v.iter().for_each(|x| self.bytes(&x.to_le_bytes()));
    }
    /// Appends a CRC-32 of everything written so far.
    pub fn seal(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.u32(crc);
        self.buf
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Format(format!(
                "truncated {what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }
    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    pub fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    pub fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let b = self.take(len, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{what} is not UTF-8")))
    }

    pub fn reals<T: Real>(&mut self, n: usize, width: usize, what: &str) -> Result<Vec<T>> {
        let bytes = n
            .checked_mul(width)
            .ok_or_else(|| Error::Format(format!("{what} length overflows")))?;
        let raw = self.take(bytes, what)?;
        Ok(match width {
            4 => raw
                .chunks_exact(4)
                .map(|c| T::cast(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            8 => raw
                .chunks_exact(8)
                .map(|c| T::cast(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
            _ => return Err(Error::Format(format!("unsupported element width {width}"))),
        })
    }
}

/// Splits off and verifies a trailing CRC-32.
pub(crate) fn unseal<'a>(bytes: &'a [u8], what: &str) -> Result<&'a [u8]> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!("{what} too short for checksum")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::Format(format!("{what} checksum mismatch")));
    }
    Ok(body)
}
