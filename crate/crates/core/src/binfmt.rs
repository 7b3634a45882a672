//! Little-endian, checksummed container shared by checkpoint and model files.
//!
//! Layout: `magic[8] | version: u32 | payload ... | sha256(everything before)[32]`.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const DIGEST_LEN: usize = 32;

pub(crate) struct BinWriter {
    buf: Vec<u8>,
}

impl BinWriter {
    pub fn new(magic: &[u8; 8], version: u32) -> Self {
        let mut buf = Vec::with_capacity(1 << 16);
        buf.extend_from_slice(magic);
        buf.extend_from_slice(&version.to_le_bytes());
        BinWriter { buf }
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64s(&mut self, values: &[f64]) {
        self.buf.reserve(values.len() * 8);
        for v in values {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }

    pub fn finish(mut self) -> Vec<u8> {
        let digest = Sha256::digest(&self.buf);
        self.buf.extend_from_slice(&digest);
        self.buf
    }

    pub fn write_to(self, path: &Path) -> Result<()> {
        let bytes = self.finish();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

pub(crate) struct BinReader<'a> {
    path: &'a Path,
    data: &'a [u8],
    pos: usize,
}

impl<'a> BinReader<'a> {
    /// Verifies magic, version and checksum; on success the cursor sits after the version.
    pub fn open(path: &'a Path, data: &'a [u8], magic: &[u8; 8], version: u32) -> Result<Self> {
        let corrupt = |detail: &str| Error::Format {
            path: path.to_path_buf(),
            detail: detail.to_string(),
        };
        if data.len() < 12 + DIGEST_LEN {
            return Err(corrupt("file too short (truncated?)"));
        }
        if &data[..8] != magic {
            return Err(corrupt("bad magic bytes"));
        }
        let (body, digest) = data.split_at(data.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or corrupt)"));
        }
        let found = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if found != version {
            return Err(corrupt(&format!(
                "format version {found} is not supported (expected {version})"
            )));
        }
        Ok(BinReader {
            path,
            data: body,
            pos: 12,
        })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: "unexpected end of payload".into(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Format {
            path: self.path.to_path_buf(),
            detail: "length overflow".into(),
        })?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                detail: "trailing bytes after payload".into(),
            });
        }
        Ok(())
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
