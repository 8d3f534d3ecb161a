//! Little-endian helpers for the binary container and checkpoint formats.

use std::path::Path;

use ndarray::{Array, Dimension, IxDyn};

use crate::error::{Error, Result};
use crate::real::{DType, Real};

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

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }

    /// Writes `ndim, shape..., payload` in the element type of `A`.
    pub fn array<F: Real, D: Dimension>(&mut self, a: &Array<F, D>) {
        self.u32(a.ndim() as u32);
        for &d in a.shape() {
            self.u64(d as u64);
        }
        for &x in a.iter() {
            x.write_le(&mut self.buf);
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8], path: &'a Path) -> Self {
        Reader { buf, pos: 0, path }
    }

    pub fn err(&self, reason: impl Into<String>) -> Error {
        Error::load(self.path, reason)
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!(
                "truncated: wanted {n} bytes at offset {}, {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
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

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err("invalid utf-8 string"))
    }

    pub fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len_prefix(8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn len_prefix(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(self.err(format!("truncated: length {n} exceeds remaining payload")));
        }
        Ok(n)
    }

    /// Reads an array written by [`Writer::array`] whose payload is stored as `dtype`.
    pub fn array<F: Real>(&mut self, dtype: DType) -> Result<Array<F, IxDyn>> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.err(format!("implausible array rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let count: usize = shape.iter().product();
        let payload = self.take(count.saturating_mul(dtype.size()))?;
        let data: Vec<F> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| F::of(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| F::of(f64::read_le(c)))
                .collect(),
        };
        Array::from_shape_vec(IxDyn(&shape), data).map_err(|e| self.err(e.to_string()))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}
