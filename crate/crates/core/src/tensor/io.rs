//! Binary tensor dump: `SPKT0001`, u32 LE rank, rank × u32 LE dims, then
//! the row-major f64 LE payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"SPKT0001";

pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Cursor over an in-memory byte buffer that reports truncation as a
/// format error against `path`.
pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Reader { bytes, pos: 0, path }
    }

    pub fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub fn tensor(&mut self) -> Result<Tensor> {
        if self.take(8)? != TENSOR_MAGIC {
            return Err(self.fail("bad tensor magic (expected SPKT0001)"));
        }
        let rank = self.u32()? as usize;
        if rank > 16 {
            return Err(self.fail(format!("implausible tensor rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(self.fail(format!("payload for shape {shape:?} truncated")));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| self.fail(e.to_string()))
    }
}

pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader::new(bytes, path);
    let t = r.tensor()?;
    if !r.at_end() {
        return Err(r.fail("trailing bytes after tensor"));
    }
    Ok(t)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}
