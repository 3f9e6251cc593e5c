//! `EMB1` embedding containers and label files.
//!
//! Layout, little-endian: `"EMB1"`, `u64` rows, `u32` dim, `u32` dtype
//! (`1` = f32), then `rows * dim` f32 values row-major.

use std::fs;
use std::io;
use std::path::Path;

/// File magic.
pub const MAGIC: [u8; 4] = *b"EMB1";
/// Dtype code for little-endian f32.
pub const DTYPE_F32: u32 = 1;
/// Header size in bytes.
pub const HEADER_LEN: usize = 20;

/// A row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    /// Number of rows.
    pub rows: usize,
    /// Row width.
    pub dim: usize,
    /// `rows * dim` values.
    pub data: Vec<f32>,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

impl Embeddings {
    /// Serialized form.
    pub fn to_bytes(&self) -> Vec<u8> {
        assert_eq!(self.data.len(), self.rows * self.dim, "data length disagrees with shape");
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * 4);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.rows as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&DTYPE_F32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses a container, checking magic, dtype and payload length.
    pub fn from_bytes(bytes: &[u8]) -> io::Result<Self> {
        if bytes.len() < HEADER_LEN || bytes[..4] != MAGIC {
            return Err(invalid("not an EMB1 container"));
        }
        let rows = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let dim = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let dtype = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes"));
        if dtype != DTYPE_F32 {
            return Err(invalid(format!("unsupported dtype code {dtype}")));
        }
        let rows = usize::try_from(rows).map_err(|_| invalid("row count too large"))?;
        let expected = rows.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(|| invalid("shape overflows"))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(invalid(format!("payload is {} bytes, shape {rows}x{dim} needs {expected}", payload.len())));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        Ok(Self { rows, dim, data })
    }

    /// Reads a container file.
    pub fn read(path: &Path) -> io::Result<Self> {
        Self::from_bytes(&fs::read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    /// Writes a container file.
    pub fn write(&self, path: &Path) -> io::Result<()> {
        fs::write(path, self.to_bytes())
    }
}

/// Parses one non-negative integer per non-empty line.
pub fn parse_labels(text: &str) -> io::Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| l.trim().parse().map_err(|e| invalid(format!("line {}: {e}", i + 1))))
        .collect()
}
