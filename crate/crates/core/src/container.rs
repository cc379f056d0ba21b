//! Versioned binary artifact container.
//!
//! ```text
//! magic     8 bytes  "SSMIXART"
//! version   u32 LE
//! header    u64 LE length + UTF-8 JSON (kind, config echo, metadata)
//! count     u32 LE
//! tensor*   u32 LE name length, name, u32 LE rank, rank × u64 LE dims,
//!           product(dims) × f64 LE
//! digest    32 bytes SHA-256 of everything above
//! ```
//!
//! JSON objects are written with sorted keys and shortest round-trip floats,
//! so reading and re-writing an artifact reproduces it byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SSMIXART";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Format(format!("tensor {name}: shape {shape:?} holds {n} values, got {}", data.len())));
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub header: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

impl Container {
    pub fn new(kind: impl Into<String>, header: &impl Serialize) -> Result<Self> {
        Ok(Self { kind: kind.into(), header: serde_json::to_value(header)?, tensors: Vec::new() })
    }

    pub fn push(&mut self, tensor: Tensor) {
        self.tensors.push(tensor);
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("{} artifact has no tensor {name:?}", self.kind)))
    }

    pub fn header_as<H: DeserializeOwned>(&self) -> Result<H> {
        Ok(serde_json::from_value(self.header.clone())?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&serde_json::json!({ "kind": self.kind, "header": self.header }))?;
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&u32::try_from(self.tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?.to_le_bytes());
        for t in &self.tensors {
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(Error::Format(format!("tensor {} has inconsistent shape", t.name)));
            }
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + 8 + 4 + 32 {
            return Err(Error::Format("artifact truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("artifact digest mismatch (file corrupted or edited)".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not an ssmix artifact (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported artifact version {version}, expected {FORMAT_VERSION}")));
        }
        let header_len = usize::try_from(r.u64()?).map_err(|_| Error::Format("header length".into()))?;
        let mut envelope: serde_json::Value = serde_json::from_slice(r.take(header_len)?)?;
        let kind = envelope
            .get("kind")
            .and_then(|k| k.as_str())
            .ok_or_else(|| Error::Format("header lacks a kind".into()))?
            .to_string();
        let header = envelope.get_mut("header").map(serde_json::Value::take).unwrap_or_default();
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Format("tensor name".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().and_then(|d| usize::try_from(d).map_err(|_| Error::Format("dimension".into()))))
                .collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor {name}: shape overflow")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor size".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes before digest".into()));
        }
        Ok(Self { kind, header, tensors })
    }

    /// Hex SHA-256 of the serialized artifact body (the value stored in the
    /// trailer).
    pub fn digest_hex(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(&bytes[bytes.len() - 32..]))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks the artifact kind.
    pub fn load_kind(path: impl AsRef<Path>, kind: &str) -> Result<Self> {
        let c = Self::load(path)?;
        if c.kind != kind {
            return Err(Error::Format(format!("expected a {kind} artifact, found {}", c.kind)));
        }
        Ok(c)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Format("artifact truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
