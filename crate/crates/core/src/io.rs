//! `.pltf` binary tensor files.
//!
//! Layout (all little-endian): magic `PLTF`, `u32` version, `u8` dtype
//! (0 = f32), `u32` rank, `rank × u64` dims, then the f32 payload.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PLTF";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum TensorFileError {
    #[error("bad magic {0:?}, expected \"PLTF\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated {section}: need {needed} bytes, have {available}")]
    Truncated {
        section: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("invalid shape: {0}")]
    Shape(#[from] crate::tensor::TensorError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 8 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8], TensorFileError> {
        let available = self.buf.len() - self.pos;
        if available < n {
            return Err(TensorFileError::Truncated {
                section,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, TensorFileError> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = c.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(TensorFileError::BadMagic(magic));
    }
    let version = u32::from_le_bytes(c.take(4, "header")?.try_into().unwrap());
    if version != VERSION {
        return Err(TensorFileError::UnsupportedVersion(version));
    }
    let dtype = c.take(1, "header")?[0];
    if dtype != DTYPE_F32 {
        return Err(TensorFileError::UnsupportedDtype(dtype));
    }
    let rank = u32::from_le_bytes(c.take(4, "header")?.try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(c.take(8, "dims")?.try_into().unwrap());
        shape.push(d as usize);
    }
    let n: usize = shape.iter().product();
    let payload = c.take(4 * n, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let rest = bytes.len() - c.pos;
    if rest != 0 {
        return Err(TensorFileError::TrailingBytes(rest));
    }
    Ok(Tensor::new(shape, data)?)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<(), TensorFileError> {
    fs::write(path, encode(t)).map_err(|source| TensorFileError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_tensor(path: &Path) -> Result<Tensor, TensorFileError> {
    let bytes = fs::read(path).map_err(|source| TensorFileError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
