//! Binary tensor archive.
//!
//! Layout (little-endian): `"PLCK"`, u32 version, u32 tensor count, then per
//! tensor: u16 name length, UTF-8 name, u8 rank, u32 extent × rank, f64 payload.

use std::fs;
use std::path::Path;

use super::{numel, ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"PLCK";
pub const VERSION: u32 = 1;

/// Ordered list of named `f64` tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor<f64>)>,
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        msg: msg.into(),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(fmt_err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f64>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn push_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.push(name, Tensor::scalar(value));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let t = self.get(name).ok_or_else(|| Error::CheckpointMissing(name.to_string()))?;
        if t.len() != 1 {
            return Err(Error::CheckpointMismatch {
                name: name.to_string(),
                expected: vec![],
                found: t.shape().to_vec(),
            });
        }
        Ok(t.data()[0])
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Snapshot of every tensor in a parameter set, in registration order.
    pub fn from_params<T: Scalar>(params: &ParamSet<T>) -> Self {
        let mut ck = Self::new();
        for (name, t) in params.iter() {
            let data = t.data().iter().map(|v| v.as_f64()).collect();
            ck.push(name, Tensor::new(t.shape().to_vec(), data).expect("finite parameters"));
        }
        ck
    }

    /// Copies values into `params`; every parameter must be present with a matching shape.
    pub fn restore_into<T: Scalar>(&self, params: &mut ParamSet<T>) -> Result<()> {
        let ids: Vec<_> = params.ids().collect();
        for &id in &ids {
            let name = params.name(id).to_string();
            let src = self.get(&name).ok_or_else(|| Error::CheckpointMissing(name.clone()))?;
            if src.shape() != params.get(id).shape() {
                return Err(Error::CheckpointMismatch {
                    name,
                    expected: params.get(id).shape().to_vec(),
                    found: src.shape().to_vec(),
                });
            }
        }
        for id in ids {
            let src = self.get(params.name(id)).expect("checked above").data().to_vec();
            for (d, s) in params.get_mut(id).data_mut().iter_mut().zip(src) {
                *d = T::lit(s);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| fmt_err(format!("name `{name}` too long")))?;
            let rank = u8::try_from(t.shape().len()).map_err(|_| fmt_err(format!("`{name}` rank too large")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &e in t.shape() {
                let e = u32::try_from(e).map_err(|_| fmt_err(format!("`{name}` extent too large")))?;
                out.extend_from_slice(&e.to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt_err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut ck = Self::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| fmt_err("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let data = (0..numel(&shape)).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|_| fmt_err(format!("`{name}` holds non-finite values")))?;
            ck.push(name, t);
        }
        if r.pos != buf.len() {
            return Err(fmt_err(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(ck)
    }

    /// Writes atomically: a partially written file never replaces a good one.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
