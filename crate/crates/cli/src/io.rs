//! `.stba` array files: `"STBA"`, a version byte, `ndim` and the dims as
//! little-endian `u64`, then the row-major little-endian `f64` payload.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use nalgebra::DMatrix;

pub const MAGIC: &[u8; 4] = b"STBA";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ArrayFile {
    pub dims: Vec<usize>,
    /// Row-major values.
    pub data: Vec<f64>,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

impl ArrayFile {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> io::Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(invalid(format!("dims {dims:?} hold {n} values, got {}", data.len())));
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>()).collect();
        Self { dims: vec![m.nrows(), m.ncols()], data }
    }

    /// Stacks equally shaped matrices into `[k, rows, cols]`.
    pub fn from_stack(frames: &[DMatrix<f64>]) -> io::Result<Self> {
        let (r, c) = frames.first().map_or((0, 0), |m| m.shape());
        if frames.iter().any(|m| m.shape() != (r, c)) {
            return Err(invalid("stacked frames differ in shape"));
        }
        let data = frames.iter().flat_map(|m| Self::from_matrix(m).data).collect();
        Ok(Self { dims: vec![frames.len(), r, c], data })
    }

    /// Two-dimensional payload as a matrix.
    pub fn to_matrix(&self) -> io::Result<DMatrix<f64>> {
        match self.dims[..] {
            [r, c] => Ok(DMatrix::from_row_slice(r, c, &self.data)),
            _ => Err(invalid(format!("expected a 2-d array, got dims {:?}", self.dims))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(13 + 8 * (self.dims.len() + self.data.len()));
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.dims.len() as u64).to_le_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> io::Result<Self> {
        if bytes.len() < 13 || &bytes[..4] != MAGIC {
            return Err(invalid("not an STBA file"));
        }
        if bytes[4] != VERSION {
            return Err(invalid(format!("unsupported STBA version {}", bytes[4])));
        }
        let mut words = bytes[5..].chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")));
        let ndim = words.next().ok_or_else(|| invalid("truncated header"))? as usize;
        let header = 13 + 8 * ndim;
        if bytes.len() < header {
            return Err(invalid("truncated header"));
        }
        let dims: Vec<usize> = words.take(ndim).map(|d| d as usize).collect();
        let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| invalid("dims overflow"))?;
        let payload = &bytes[header..];
        if payload.len() != n * 8 {
            return Err(invalid(format!("payload has {} bytes, dims {dims:?} need {}", payload.len(), n * 8)));
        }
        let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Self { dims, data })
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
