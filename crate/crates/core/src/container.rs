//! Shared binary container primitives for dataset and checkpoint files.
//!
//! Both formats are little-endian with a 4-byte magic and a u16 version,
//! followed by format-specific records. Tensors are encoded as a u8 rank,
//! u32 extents, then raw f32 data. Reads go through a position-tracking
//! slice reader so truncation errors can report exact byte counts.

use std::path::Path;

use stsr_tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { expected: u16, found: u16 },
    #[error("truncated file: expected at least {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("corrupt file: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, FormatError>;

const MAX_RANK: u8 = 8;

pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(FormatError::Truncated {
                expected: (self.pos + n) as u64,
                actual: self.buf.len() as u64,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != expected {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(expected).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        Ok(())
    }

    pub fn version(&mut self, expected: u16) -> Result<()> {
        let found = self.u16()?;
        if found != expected {
            return Err(FormatError::UnsupportedVersion { expected, found });
        }
        Ok(())
    }

    pub fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| FormatError::Corrupt("string field is not utf-8".into()))
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u8()?;
        if rank > MAX_RANK {
            return Err(FormatError::Corrupt(format!("tensor rank {rank} exceeds {MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let e = self.u32()? as usize;
            numel = numel
                .checked_mul(e)
                .ok_or_else(|| FormatError::Corrupt("tensor extent overflow".into()))?;
            shape.push(e);
        }
        let bytes = self.take(numel * 4)?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape, data).map_err(|e| FormatError::Corrupt(e.to_string()))
    }
}

#[derive(Default)]
pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn magic(&mut self, m: &[u8; 4]) {
        self.buf.extend_from_slice(m);
    }

    pub fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }

    pub fn tensor(&mut self, t: &Tensor) {
        self.u8(t.shape().len() as u8);
        for e in t.shape() {
            self.u32(*e as u32);
        }
        for v in t.data() {
            self.f32(*v);
        }
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}
