//! Binary parameter container.
//!
//! Layout: the magic bytes `HGERE1`, then for every parameter in order the
//! name length (u64), the UTF-8 name, the rank (u64), each dimension (u64)
//! and the raw values (f64). All integers and floats are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::ParamSet;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"HGERE1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad checkpoint: {0}")]
    Format(String),
}

pub fn to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for d in t.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Format(format!(
                "truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| CheckpointError::Format(format!("length {v} too large")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ParamSet, CheckpointError> {
    if buf.len() < MAGIC.len() || &buf[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Format("missing HGERE1 magic".into()));
    }
    let mut c = Cursor {
        buf,
        pos: MAGIC.len(),
    };
    let mut params = ParamSet::new();
    while c.pos < buf.len() {
        let len = c.usize()?;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| CheckpointError::Format(format!("parameter name: {e}")))?
            .to_string();
        let rank = c.usize()?;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(c.usize()?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Format(format!("{name}: shape overflow")))?;
        let raw = c.take(n.checked_mul(8).ok_or_else(|| {
            CheckpointError::Format(format!("{name}: shape overflow"))
        })?)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        params
            .add(name, t)
            .map_err(|e| CheckpointError::Format(e.to_string()))?;
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamSet) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&to_bytes(params)).map_err(io)
}

pub fn load(path: &Path) -> Result<ParamSet, CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(io)?
        .read_to_end(&mut buf)
        .map_err(io)?;
    from_bytes(&buf)
}
