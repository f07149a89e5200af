//! Binary checkpoint: parameters plus optional Adagrad accumulators.
//!
//! Layout (little-endian):
//!
//! ```text
//! "HLT1"
//! u32 parameter count, then per parameter a record
//! u32 accumulator count (0 or parameter count), then one record each
//! record: u32 name length, UTF-8 name, u32 rank, rank × u32 dims, f32 data
//! ```

use std::fs;
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HLT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f32>,
    pub accumulators: Vec<Tensor<f32>>,
}

fn put_record(buf: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for d in t.shape() {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + 8 * self.params.numel());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            put_record(&mut buf, name, t);
        }
        buf.extend_from_slice(&(self.accumulators.len() as u32).to_le_bytes());
        for ((name, _), acc) in self.params.iter().zip(&self.accumulators) {
            put_record(&mut buf, name, acc);
        }
        buf
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.error("bad magic"));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let (name, t) = r.record()?;
            params.insert(name, t)?;
        }
        let n_acc = r.u32()? as usize;
        if n_acc != 0 && n_acc != count {
            return Err(r.error("accumulator count differs from parameter count"));
        }
        let mut accumulators = Vec::with_capacity(n_acc);
        for (name, p) in params.iter().take(n_acc) {
            let (acc_name, t) = r.record()?;
            if acc_name != name || t.shape() != p.shape() {
                return Err(r.error(&format!("accumulator {} does not match {}", acc_name, name)));
            }
            accumulators.push(t);
        }
        if r.pos != bytes.len() {
            return Err(r.error("trailing bytes"));
        }
        Ok(Checkpoint {
            params,
            accumulators,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn error(&self, message: &str) -> Error {
        Error::Format {
            format: "checkpoint",
            path: self.path.to_path_buf(),
            message: format!("{} at byte {}", message, self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| self.error("parameter name is not UTF-8"))?
            .to_string();
        let rank = self.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.error("tensor too large"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::new(shape, data)?))
    }
}
