//! The `CBT1` binary container: a table of named tensors followed by a list of
//! provenance strings and a metadata block.
//!
//! ```text
//! "CBT1" | u32 version | u32 entry count
//! per entry: u32 name len | name | u8 dtype | u8 rank | u32 dims… | payload (LE)
//! u32 provenance count | per string: u32 len | bytes
//! u32 metadata len | metadata (key=value text)
//! ```
//!
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kvtext;
use crate::numerics::{ParameterVector, Tensor};

pub const MAGIC: &[u8; 4] = b"CBT1";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;
const DTYPE_I32: u8 = 2;

/// Payload of one container entry.
#[derive(Clone, Debug, PartialEq)]
pub enum EntryData {
    F64(Tensor),
    I32 { shape: Vec<usize>, values: Vec<i32> },
}

impl EntryData {
    pub fn shape(&self) -> &[usize] {
        match self {
            EntryData::F64(t) => t.shape(),
            EntryData::I32 { shape, .. } => shape,
        }
    }
}

/// In-memory form of a container file.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Container {
    pub entries: Vec<(String, EntryData)>,
    pub provenance: Vec<String>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.push((name.into(), EntryData::F64(t)));
    }

    pub fn push_params(&mut self, params: &ParameterVector, suffix: &str) {
        for (n, t) in params.entries() {
            self.push_tensor(format!("{n}{suffix}"), t.clone());
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        match self.entries.iter().find(|(n, _)| n == name) {
            Some((_, EntryData::F64(t))) => Ok(t),
            Some(_) => Err(Error::Format(format!("entry `{name}` is not a real tensor"))),
            None => Err(Error::Format(format!("missing entry `{name}`"))),
        }
    }

    pub fn i32_entry(&self, name: &str) -> Result<(&[usize], &[i32])> {
        match self.entries.iter().find(|(n, _)| n == name) {
            Some((_, EntryData::I32 { shape, values })) => Ok((shape, values)),
            Some(_) => Err(Error::Format(format!("entry `{name}` is not an integer tensor"))),
            None => Err(Error::Format(format!("missing entry `{name}`"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, self.entries.len() as u32);
        for (name, data) in &self.entries {
            put_str(&mut out, name);
            let shape = data.shape();
            out.push(match data {
                EntryData::F64(_) => DTYPE_F64,
                EntryData::I32 { .. } => DTYPE_I32,
            });
            out.push(shape.len() as u8);
            for &d in shape {
                put_u32(&mut out, d as u32);
            }
            match data {
                EntryData::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                EntryData::I32 { values, .. } => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        put_u32(&mut out, self.provenance.len() as u32);
        for p in &self.provenance {
            put_str(&mut out, p);
        }
        put_str(&mut out, &kvtext::render(&self.metadata));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        const HEADER: &str = "<header>";
        let magic = r.take(4, HEADER)?;
        if magic != MAGIC {
            return Err(Error::Format(format!("bad magic {magic:02x?}, expected \"CBT1\"")));
        }
        let version = r.u32(HEADER)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u32(HEADER)? as usize;
        let mut entries: Vec<(String, EntryData)> = Vec::new();
        for i in 0..count {
            let placeholder = format!("<entry {i}>");
            let name = r.string(&placeholder)?;
            if name.is_empty() || entries.iter().any(|(n, _)| *n == name) {
                return Err(Error::Format(format!("empty or duplicate entry name `{name}`")));
            }
            let dtype = r.u8(&name)?;
            let rank = r.u8(&name)? as usize;
            if rank == 0 {
                return Err(Error::Format(format!("entry `{name}` has rank 0")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&name)? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Format(format!("entry `{name}` has invalid shape {shape:?}")))?;
            let data = match dtype {
                DTYPE_F64 => {
                    let raw = r.take(
                        n.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?,
                        &name,
                    )?;
                    let vals = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    EntryData::F64(Tensor::new(shape, vals).map_err(|e| Error::Format(format!("entry `{name}`: {e}")))?)
                }
                DTYPE_F32 => {
                    let raw = r.take(
                        n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?,
                        &name,
                    )?;
                    let vals = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect();
                    EntryData::F64(Tensor::new(shape, vals).map_err(|e| Error::Format(format!("entry `{name}`: {e}")))?)
                }
                DTYPE_I32 => {
                    let raw = r.take(
                        n.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?,
                        &name,
                    )?;
                    let values = raw
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    EntryData::I32 { shape, values }
                }
                other => return Err(Error::Format(format!("entry `{name}` has unknown dtype code {other}"))),
            };
            entries.push((name, data));
        }
        const TRAILER: &str = "<provenance>";
        let pcount = r.u32(TRAILER)? as usize;
        let mut provenance = Vec::new();
        for _ in 0..pcount {
            provenance.push(r.string(TRAILER)?);
        }
        let meta = r.string("<metadata>")?;
        let metadata = kvtext::parse(&meta).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            entries,
            provenance,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, ctx: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                tensor: ctx.to_string(),
            }),
        }
    }

    fn u8(&mut self, ctx: &str) -> Result<u8> {
        Ok(self.take(1, ctx)?[0])
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().unwrap()))
    }

    fn string(&mut self, ctx: &str) -> Result<String> {
        let n = self.u32(ctx)? as usize;
        let raw = self.take(n, ctx)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format(format!("non-UTF-8 string in {ctx}")))
    }
}
