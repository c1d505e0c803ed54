//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "LDCKPT\0\0"
//! version u32
//! kind    u32 length + UTF-8
//! header  u32 length + UTF-8 (model configuration, JSON)
//! count   u32
//! entry*  name (u32 length + UTF-8), ndim u32, dims u64*ndim, values f64*product(dims)
//! ```

use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LDCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub header: String,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(kind: &str, header: &str, params: &ParamSet) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            header: header.to_string(),
            params: params
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        put_str(&mut out, &self.header);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, t) in &self.params {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let kind = r.string()?;
        let header = r.string()?;
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(8));
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or("shape overflow")?;
            let raw = r.take(n.checked_mul(8).ok_or("shape overflow")?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
            params.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(Checkpoint {
            kind,
            header,
            params,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes).map_err(|message| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        })
    }
}

/// A model whose parameters travel through a [`Checkpoint`].
pub trait Checkpointed: Sized {
    const KIND: &'static str;

    /// Configuration needed to rebuild the model's parameter layout.
    fn header(&self) -> String;

    /// Rebuilds the layout from a header; values are overwritten on load.
    fn from_header(header: &str) -> Result<Self>;

    fn params(&self) -> &ParamSet;

    fn params_mut(&mut self) -> &mut ParamSet;

    fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_params(Self::KIND, &self.header(), self.params())
    }

    fn from_checkpoint(ck: Checkpoint, path: &Path) -> Result<Self> {
        let mismatch = |message: String| Error::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        if ck.kind != Self::KIND {
            return Err(mismatch(format!(
                "expected a {} checkpoint, found {}",
                Self::KIND,
                ck.kind
            )));
        }
        let mut model = Self::from_header(&ck.header).map_err(|e| mismatch(e.to_string()))?;
        model
            .params_mut()
            .load_values(ck.params)
            .map_err(|e| mismatch(e.to_string()))?;
        Ok(model)
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        Self::from_checkpoint(ck, path)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).ok_or("length overflow")?;
        if end > self.bytes.len() {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> std::result::Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| e.to_string())
    }
}
