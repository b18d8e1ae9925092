//! Binary checkpoint container.
//!
//! Layout (all integers little-endian): magic `CCDCKPT1`; config digest as
//! `u32` length + UTF-8; epoch `u64`; `u32` parameter count, then per
//! parameter `u32` name length + UTF-8 name, `u32` rank, `u32` extents and
//! `f64` values; then the optimizer step `u64` and, per parameter in the
//! same order, a presence byte followed by the first and second moments.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Parameters, Tensor};
use crate::train::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CCDCKPT1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_digest: String,
    pub epoch: u64,
    pub params: Parameters,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_str(&mut buf, &self.config_digest)?;
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        put_u32(&mut buf, self.params.len())?;
        for (name, p) in self.params.iter() {
            put_str(&mut buf, name)?;
            put_tensor(&mut buf, &p.value)?;
        }
        buf.extend_from_slice(&self.adam.step.to_le_bytes());
        for name in self.params.names() {
            match self.adam.moments.get(name) {
                Some((m, v)) => {
                    buf.push(1);
                    put_tensor(&mut buf, m)?;
                    put_tensor(&mut buf, v)?;
                }
                None => buf.push(0),
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.err("bad checkpoint magic"));
        }
        let config_digest = r.string()?;
        let epoch = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Parameters::new();
        let mut names = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            params.insert(name.clone(), r.tensor()?);
            names.push(name);
        }
        let step = r.u64()?;
        let mut adam = AdamState {
            step,
            ..Default::default()
        };
        for name in names {
            match r.take(1)?[0] {
                0 => {}
                1 => {
                    let m = r.tensor()?;
                    let v = r.tensor()?;
                    adam.moments.insert(name, (m, v));
                }
                b => return Err(r.err(&format!("bad moment presence byte {b}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Checkpoint {
            config_digest,
            epoch,
            params,
            adam,
        })
    }

    /// Writes through a temporary file so an interrupted save keeps the
    /// previous checkpoint intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Input(format!("{v} exceeds u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(buf, s.len())?;
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    put_u32(buf, t.rank())?;
    for &e in t.shape() {
        put_u32(buf, e)?;
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            detail: format!("{detail} at byte {}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated checkpoint"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("name is not UTF-8"))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        if n.checked_mul(8).is_none_or(|b| b > self.bytes.len() - self.pos) {
            return Err(self.err("truncated tensor"));
        }
        let data = self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(&shape, data).map_err(|_| self.err("bad tensor shape"))
    }
}
