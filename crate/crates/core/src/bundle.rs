//! The `IVCS` named-tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "IVCS" | u16 version | u16 flags | u32 record count
//! per record: u16 name length | UTF-8 name | u8 dtype | u8 ndim | ndim x u64 dims | payload
//! u64 FNV-1a of every preceding byte
//! ```
//!
//! dtype 0 is `f32` LE in row-major order. dtype 1 is raw bytes (`ndim` 1),
//! used for fingerprints and other text metadata.

use std::collections::HashSet;
use std::path::Path;

use diffcore::Tensor;

use crate::error::{Error, Result};
use crate::util::fnv1a;

pub const MAGIC: &[u8; 4] = b"IVCS";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_BYTES: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Tensor<f32>),
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: Payload,
}

/// Ordered, uniquely named records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bundle {
    records: Vec<Record>,
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn insert(&mut self, name: &str, payload: Payload) -> Result<()> {
        if name.len() > u16::MAX as usize {
            return Err(Error::Format(format!("record name too long: {} bytes", name.len())));
        }
        if self.records.iter().any(|r| r.name == name) {
            return Err(Error::Format(format!("duplicate record `{name}`")));
        }
        self.records.push(Record {
            name: name.to_string(),
            payload,
        });
        Ok(())
    }

    pub fn insert_tensor(&mut self, name: &str, t: Tensor<f32>) -> Result<()> {
        if t.shape().len() > u8::MAX as usize {
            return Err(Error::Format(format!("`{name}` has too many dims")));
        }
        self.insert(name, Payload::F32(t))
    }

    pub fn insert_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        self.insert(name, Payload::Bytes(bytes.to_vec()))
    }

    pub fn insert_text(&mut self, name: &str, text: &str) -> Result<()> {
        self.insert_bytes(name, text.as_bytes())
    }

    fn find(&self, name: &str) -> Result<&Payload> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .map(|r| &r.payload)
            .ok_or_else(|| Error::Format(format!("missing record `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.records.iter().any(|r| r.name == name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        match self.find(name)? {
            Payload::F32(t) => Ok(t),
            Payload::Bytes(_) => Err(Error::Format(format!("`{name}` is not an f32 record"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match self.find(name)? {
            Payload::Bytes(b) => Ok(b),
            Payload::F32(_) => Err(Error::Format(format!("`{name}` is not a byte record"))),
        }
    }

    pub fn text(&self, name: &str) -> Result<String> {
        String::from_utf8(self.bytes(name)?.to_vec())
            .map_err(|_| Error::Format(format!("`{name}` is not UTF-8")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u16).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            match &r.payload {
                Payload::F32(t) => {
                    out.push(DTYPE_F32);
                    out.push(t.shape().len() as u8);
                    for &d in t.shape() {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Payload::Bytes(b) => {
                    out.push(DTYPE_BYTES);
                    out.push(1);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 + 8 {
            return Err(Error::Format(format!("file too short ({} bytes)", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().unwrap());
        if fnv1a(body) != stored {
            return Err(Error::Format("checksum mismatch".into()));
        }
        let mut cur = Cursor { buf: body, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = cur.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let _flags = cur.u16()?;
        let count = cur.u32()? as usize;
        let mut bundle = Bundle::new();
        let mut seen = HashSet::new();
        for _ in 0..count {
            let nlen = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(nlen)?)
                .map_err(|_| Error::Format("record name is not UTF-8".into()))?
                .to_string();
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate record `{name}`")));
            }
            let dtype = cur.u8()?;
            let ndim = cur.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(usize::try_from(cur.u64()?).map_err(|_| Error::Format("dim overflow".into()))?);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("`{name}` size overflow")))?;
            let payload = match dtype {
                DTYPE_F32 => {
                    let raw = cur.take(numel.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Payload::F32(Tensor::new(dims, data)?)
                }
                DTYPE_BYTES if ndim == 1 => Payload::Bytes(cur.take(numel)?.to_vec()),
                other => return Err(Error::Format(format!("`{name}`: unknown dtype {other}"))),
            };
            bundle.records.push(Record { name, payload });
        }
        if cur.pos != body.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last record",
                body.len() - cur.pos
            )));
        }
        Ok(bundle)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.to_path_buf())
            } else {
                Error::io(path.display().to_string(), e)
            }
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("declared payload runs past end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
