//! Binary checkpoint container.
//!
//! ```text
//! magic       9 bytes  "LOTUSCKPT"
//! version     u32 LE   (currently 1)
//! meta_len    u32 LE, then meta_len bytes of UTF-8 (JSON model metadata)
//! n_params    u32 LE
//! per param:  name_len u32, name bytes, h u32, w u32, c u32, h*w*c f32 LE
//! has_adam    u8 (0 or 1)
//! if has_adam: step u64, beta1 f64, beta2 f64, eps f64,
//!              then per param (same order) first moment f32s, second moment f32s
//! ```
//!
//! Values are stored as 32-bit floats, so decoding and re-encoding a
//! checkpoint reproduces it byte for byte.

use std::fs;
use std::path::Path;

use super::adam::AdamState;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::numerics::Grid;

pub const MAGIC: &[u8; 9] = b"LOTUSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON describing the model (net config, annotation space, ...).
    pub metadata: String,
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, g: &Grid) {
    for &v in g.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.metadata.len() as u32);
        out.extend_from_slice(self.metadata.as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (name, g) in self.params.iter() {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            for d in [g.height(), g.width(), g.channels()] {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, g);
        }
        match &self.adam {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.step_count.to_le_bytes());
                for v in [st.beta1, st.beta2, st.eps] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for (m, v) in st.first_moment.iter().zip(&st.second_moment) {
                    put_f32s(&mut out, m);
                    put_f32s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec()).map_err(|_| r.err("metadata not UTF-8"))?;
        let n = r.u32()? as usize;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| r.err("name not UTF-8"))?;
            let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
            let g = r.grid(h, w, c)?;
            params.insert(name, g)?;
        }
        let adam = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step_count = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let mut first_moment = Vec::with_capacity(n);
                let mut second_moment = Vec::with_capacity(n);
                for p in params.values() {
                    first_moment.push(r.grid(p.height(), p.width(), p.channels())?);
                    second_moment.push(r.grid(p.height(), p.width(), p.channels())?);
                }
                Some(AdamState { first_moment, second_moment, step_count, beta1, beta2, eps })
            }
            _ => return Err(r.err("bad optimizer flag")),
        };
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Checkpoint { metadata, params, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, detail: &str) -> Error {
        Error::Format { what: "checkpoint", detail: format!("{detail} (offset {})", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos + n).ok_or_else(|| self.err("truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn grid(&mut self, h: usize, w: usize, c: usize) -> Result<Grid> {
        let raw = self.take(h * w * c * 4)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        Grid::from_vec(h, w, c, data)
    }
}
