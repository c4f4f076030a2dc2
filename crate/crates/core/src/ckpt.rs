//! Versioned, hash-verified binary container shared by all checkpoints.
//!
//! ```text
//! offset   size  field
//! 0        8     magic  b"DRFCKPT\0"
//! 8        4     format version, u32 LE
//! 12       4     kind tag, u32 LE (1 field, 2 prior, 3 train state)
//! 16       8     payload length N, u64 LE
//! 24       N     payload
//! 24+N     32    SHA-256 over bytes [0, 24+N)
//! ```
//!
//! Payload values are little-endian. Arrays are a u64 element count followed
//! by raw IEEE-754 binary64 values in row-major order; strings are a u64 byte
//! count followed by UTF-8. Decoding is all-or-nothing: a file that fails any
//! check yields an error and no partial value.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DRFCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 24;
const HASH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Field = 1,
    Prior = 2,
    TrainState = 3,
}

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u128(&mut self, v: u128) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.u64(vs.len() as u64);
        self.buf.reserve(vs.len() * 8);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
        self
    }

    pub fn str(&mut self, s: &str) -> &mut Self {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    /// Wraps the payload in the container framing.
    pub fn finish(&self, kind: Kind, version: u32) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.buf.len() + HASH);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(kind as u32).to_le_bytes());
        out.extend_from_slice(&(self.buf.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.buf);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn write_file(&self, path: impl AsRef<Path>, kind: Kind) -> Result<()> {
        write_atomic(path.as_ref(), &self.finish(kind, FORMAT_VERSION))
    }
}

/// Writes via a sibling temp file and rename so readers never see a torn file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub struct Reader<'a> {
    path: PathBuf,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corrupt {
            path: self.path.clone(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.corrupt(format!("payload ends early at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    pub fn usize(&mut self) -> Result<usize> {
        Ok(self.u64()? as usize)
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(self.corrupt(format!("array of {n} values exceeds payload")));
        }
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn f64s_len(&mut self, expected: usize) -> Result<Vec<f64>> {
        let v = self.f64s()?;
        if v.len() != expected {
            return Err(self.corrupt(format!("array has {} values, expected {expected}", v.len())));
        }
        Ok(v)
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.usize()?;
        if n > self.buf.len() - self.pos {
            return Err(self.corrupt("string exceeds payload"));
        }
        let bytes = self.take(n)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.corrupt("invalid utf-8"))
    }

    /// Errors unless every payload byte was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.corrupt(format!("{} trailing payload bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

/// Validates framing, version, kind and hash; returns the payload.
pub fn open<'a>(path: &Path, bytes: &'a [u8], kind: Kind) -> Result<Reader<'a>> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < HEADER + HASH {
        return Err(corrupt(format!("file is {} bytes, shorter than framing", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let tag = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if bytes.len() != HEADER + len + HASH {
        return Err(corrupt(format!(
            "length mismatch: header declares {} payload bytes, file has {}",
            len,
            bytes.len().saturating_sub(HEADER + HASH)
        )));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let digest = Sha256::digest(&bytes[..HEADER + len]);
    if digest.as_slice() != &bytes[HEADER + len..] {
        return Err(corrupt("content hash mismatch".into()));
    }
    if tag != kind as u32 {
        return Err(corrupt(format!("kind tag {tag}, expected {}", kind as u32)));
    }
    Ok(Reader {
        path: path.to_path_buf(),
        buf: &bytes[HEADER..HEADER + len],
        pos: 0,
    })
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    fs::read(path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(7).f64s(&[1.5, -0.0, f64::MIN_POSITIVE]).str("softplus");
        w.finish(Kind::Field, FORMAT_VERSION)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let bytes = sample();
        let mut r = open(Path::new("x"), &bytes, Kind::Field).unwrap();
        assert_eq!(r.u32().unwrap(), 7);
        let v = r.f64s().unwrap();
        assert_eq!(v[1].to_bits(), (-0.0f64).to_bits());
        assert_eq!(v[2], f64::MIN_POSITIVE);
        assert_eq!(r.str().unwrap(), "softplus");
        r.finish().unwrap();
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = sample();
        for cut in [0, 10, bytes.len() - 1] {
            let err = open(Path::new("x"), &bytes[..cut], Kind::Field).err().unwrap();
            assert!(matches!(err, Error::Corrupt { .. }), "{err}");
        }
    }

    #[test]
    fn flipped_bit_is_corruption() {
        let mut bytes = sample();
        bytes[30] ^= 1;
        assert!(matches!(
            open(Path::new("x"), &bytes, Kind::Field),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn version_error_names_both_versions() {
        let mut w = Writer::new();
        w.u32(1);
        let bytes = w.finish(Kind::Field, FORMAT_VERSION + 1);
        let err = open(Path::new("x"), &bytes, Kind::Field).err().unwrap();
        let msg = err.to_string();
        assert!(msg.contains(&(FORMAT_VERSION + 1).to_string()));
        assert!(msg.contains(&FORMAT_VERSION.to_string()));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let bytes = sample();
        assert!(open(Path::new("x"), &bytes, Kind::Prior).is_err());
    }
}
