//! Flat binary container for models.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "KARSTMDL" (adapted model) | "KARSTAFF" (merged affine)
//! version      u32       currently 1
//! header_len   u64
//! header       JSON, UTF-8, header_len bytes
//! n_tensors    u32
//! n_tensors times:
//!   name_len   u32
//!   name       UTF-8
//!   rows       u64
//!   cols       u64
//!   data       rows*cols f64, row-major
//! ```
//!
//! Vectors are stored as `1 × len` tensors. Values are written as raw bit
//! patterns, so a save/load round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{KarstError, Result};
use crate::numerics::DenseMatrix;

pub const FORMAT_VERSION: u32 = 1;

/// Guards against allocating absurd buffers when reading a corrupt file.
const MAX_HEADER_BYTES: u64 = 64 << 20;
const MAX_TENSOR_ELEMS: u64 = 1 << 28;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchiveKind {
    Adapted,
    Merged,
}

impl ArchiveKind {
    fn magic(self) -> &'static [u8; 8] {
        match self {
            ArchiveKind::Adapted => b"KARSTMDL",
            ArchiveKind::Merged => b"KARSTAFF",
        }
    }

    fn from_magic(bytes: &[u8; 8]) -> Result<Self> {
        match bytes {
            b"KARSTMDL" => Ok(ArchiveKind::Adapted),
            b"KARSTAFF" => Ok(ArchiveKind::Merged),
            _ => Err(KarstError::Format(format!("bad magic {bytes:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: ArchiveKind,
    pub header: serde_json::Value,
    pub tensors: Vec<(String, DenseMatrix)>,
}

impl Archive {
    pub fn new(kind: ArchiveKind, header: serde_json::Value) -> Self {
        Self {
            kind,
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: DenseMatrix) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&DenseMatrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Looks up a tensor, failing with the missing name.
    pub fn require(&self, name: &str) -> Result<&DenseMatrix> {
        self.get(name)
            .ok_or_else(|| KarstError::Format(format!("missing tensor `{name}`")))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.kind.magic())?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rows() as u64).to_le_bytes())?;
            w.write_all(&(t.cols() as u64).to_le_bytes())?;
            for v in t.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        let kind = ArchiveKind::from_magic(&magic)?;
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(KarstError::Format(format!("unsupported version {version}")));
        }
        let header_len = read_u64(&mut r)?;
        if header_len > MAX_HEADER_BYTES {
            return Err(KarstError::Format(format!("header length {header_len} too large")));
        }
        let mut header = vec![0u8; header_len as usize];
        read_exact(&mut r, &mut header)?;
        let header = serde_json::from_slice(&header)
            .map_err(|e| KarstError::Format(format!("header is not valid JSON: {e}")))?;
        let n = read_u32(&mut r)?;
        let mut tensors = Vec::new();
        for _ in 0..n {
            let name_len = read_u32(&mut r)?;
            if name_len > 4096 {
                return Err(KarstError::Format(format!("tensor name length {name_len} too large")));
            }
            let mut name = vec![0u8; name_len as usize];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| KarstError::Format("tensor name is not UTF-8".into()))?;
            let rows = read_u64(&mut r)?;
            let cols = read_u64(&mut r)?;
            let elems = rows
                .checked_mul(cols)
                .filter(|&e| e <= MAX_TENSOR_ELEMS)
                .ok_or_else(|| KarstError::Format(format!("tensor `{name}` has absurd shape {rows}x{cols}")))?;
            let mut data = Vec::with_capacity(elems as usize);
            let mut buf = [0u8; 8];
            for _ in 0..elems {
                read_exact(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            tensors.push((name, DenseMatrix::new(rows as usize, cols as usize, data)?));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(KarstError::Format("trailing bytes after last tensor".into()));
        }
        Ok(Self { kind, header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => KarstError::Format("file truncated".into()),
        _ => KarstError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
