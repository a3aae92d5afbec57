//! Versioned little-endian binary container shared by feature blobs,
//! score matrices and checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` reserved (zero),
//! `u64` payload length, `u64` payload checksum (leading eight bytes of the
//! SHA-256 digest, little-endian), then the payload.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 32;

pub fn digest64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32s(&mut self, vs: &[f32]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Length-prefixed byte string.
    pub fn bytes(&mut self, bytes: &[u8]) {
        self.u64(bytes.len() as u64);
        self.buf.extend_from_slice(bytes);
    }

    pub fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    pub fn seal(self, magic: &[u8; 8], version: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.buf.len());
        out.extend_from_slice(magic);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        out.extend_from_slice(&(self.buf.len() as u64).to_le_bytes());
        out.extend_from_slice(&digest64(&self.buf).to_le_bytes());
        out.extend_from_slice(&self.buf);
        out
    }
}

#[derive(Debug)]
pub struct Reader<'a> {
    what: String,
    payload: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Validates the header and checksum. Each failure mode maps to its own error variant.
    pub fn open(bytes: &'a [u8], magic: &[u8; 8], version: u32, what: &str) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != magic {
            return Err(Error::Format(format!(
                "{what}: bad magic bytes (expected {:?})",
                String::from_utf8_lossy(magic)
            )));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated(format!("{what}: header is {} bytes", bytes.len())));
        }
        let found = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if found != version {
            return Err(Error::Version {
                expected: version,
                found,
            });
        }
        let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let checksum = u64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let body = &bytes[HEADER_LEN..];
        if body.len() < len {
            return Err(Error::Truncated(format!(
                "{what}: payload has {} of {len} bytes",
                body.len()
            )));
        }
        if body.len() > len {
            return Err(Error::Format(format!("{what}: {} trailing bytes", body.len() - len)));
        }
        if digest64(body) != checksum {
            return Err(Error::Checksum(what.to_string()));
        }
        Ok(Self {
            what: what.to_string(),
            payload: body,
            pos: 0,
        })
    }

    pub fn payload(&self) -> &'a [u8] {
        self.payload
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.payload.len()
    }

    pub fn seek(&mut self, pos: usize) -> Result<()> {
        if pos > self.payload.len() {
            return Err(self.truncated(pos - self.payload.len()));
        }
        self.pos = pos;
        Ok(())
    }

    fn truncated(&self, need: usize) -> Error {
        Error::Truncated(format!("{}: need {need} more bytes at offset {}", self.what, self.pos))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.payload.len());
        match end {
            Some(end) => {
                let s = &self.payload[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.truncated(n)),
        }
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.truncated(usize::MAX))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.truncated(usize::MAX))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn raw(&mut self, n: usize) -> Result<&'a [u8]> {
        self.take(n)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }

    pub fn str(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Format(format!("{}: invalid UTF-8", self.what)))
    }
}
