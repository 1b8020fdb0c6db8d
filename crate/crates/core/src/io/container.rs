//! `DPAB1` named-tensor container.
//!
//! Layout (little-endian):
//! magic `DPAB1` | u32 version | u32 meta_len | meta JSON | u32 count |
//! count × (u16 name_len | name | u8 dtype | u8 ndim | ndim × u32 dim | u64 offset) |
//! u64 payload_len | payload | u32 CRC32 of every preceding byte.

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"DPAB1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::U8(_) => 1,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }

    fn byte_len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len() * 4,
            Payload::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Payload,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new(metadata: serde_json::Value) -> Self {
        Self {
            metadata,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Payload) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|e| e.name == name) {
            return Err(Error::usage(format!("duplicate entry {name}")));
        }
        if name.len() > u16::MAX as usize || shape.len() > u8::MAX as usize {
            return Err(Error::usage(format!("entry {name}: name or rank too long")));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::dim(format!("entry {name}: shape {shape:?} vs {} values", data.len())));
        }
        self.entries.push(Entry { name, shape, data });
        Ok(())
    }

    /// Stores a tensor rounded to f32.
    pub fn push_tensor(&mut self, name: impl Into<String>, t: &Tensor<f64>) -> Result<()> {
        let data = t.data().iter().map(|&v| v as f32).collect();
        self.push(name, t.shape().to_vec(), Payload::F32(data))
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Format(format!("missing entry {name}")))
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor<f64>> {
        let e = self.entry(name)?;
        match &e.data {
            Payload::F32(v) => Tensor::from_vec(e.shape.clone(), v.iter().map(|&x| x as f64).collect()),
            Payload::U8(_) => Err(Error::Format(format!("entry {name} is u8, expected f32"))),
        }
    }

    pub fn f32s(&self, name: &str) -> Result<&[f32]> {
        match &self.entry(name)?.data {
            Payload::F32(v) => Ok(v),
            Payload::U8(_) => Err(Error::Format(format!("entry {name} is u8, expected f32"))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.entry(name)?.data {
            Payload::U8(v) => Ok(v),
            Payload::F32(_) => Err(Error::Format(format!("entry {name} is f32, expected u8"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                let d = u32::try_from(d).map_err(|_| Error::usage(format!("entry {}: extent too large", e.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += e.data.byte_len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for e in &self.entries {
            match &e.data {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Crc { stored, computed });
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut dir = Vec::with_capacity(count.min(1 << 16));
        let mut names = HashSet::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            if !names.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate entry {name}")));
            }
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()?;
            dir.push((name, dtype, shape, offset));
        }
        let payload_len = r.u64()? as usize;
        let payload = r.take(payload_len)?;
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        let mut entries = Vec::with_capacity(dir.len());
        for (name, dtype, shape, offset) in dir {
            let n: usize = shape.iter().product();
            let width = match dtype {
                0 => 4,
                1 => 1,
                t => return Err(Error::Format(format!("entry {name}: unknown dtype {t}"))),
            };
            let start = usize::try_from(offset).map_err(|_| Error::Format(format!("entry {name}: offset overflow")))?;
            let end = n
                .checked_mul(width)
                .and_then(|b| start.checked_add(b))
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Format(format!("entry {name}: data out of bounds")))?;
            let raw = &payload[start..end];
            let data = if dtype == 0 {
                Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
            } else {
                Payload::U8(raw.to_vec())
            };
            entries.push(Entry { name, shape, data });
        }
        Ok(Self { metadata, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new(serde_json::json!({"kind": "test", "seed": 3}));
        c.push("w", vec![2, 3], Payload::F32(vec![1.0, -2.5, 3.25, 0.0, 1e-7, f32::MAX])).unwrap();
        c.push("img", vec![2, 2], Payload::U8(vec![0, 7, 128, 255])).unwrap();
        c.push("empty", vec![0], Payload::F32(vec![])).unwrap();
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..5], MAGIC);
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
    }

    #[test]
    fn flipped_byte_fails_crc() {
        let bytes = sample().to_bytes().unwrap();
        for i in [10, bytes.len() / 2, bytes.len() - 6] {
            let mut b = bytes.clone();
            b[i] ^= 0x40;
            assert!(matches!(Container::from_bytes(&b), Err(Error::Crc { .. })), "byte {i}");
        }
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 9]).is_err());
        let mut b = bytes.clone();
        b[0] = b'X';
        assert!(matches!(Container::from_bytes(&b), Err(Error::Format(_))));
    }

    #[test]
    fn duplicate_and_shape_checks() {
        let mut c = sample();
        assert!(c.push("w", vec![1], Payload::F32(vec![0.0])).is_err());
        assert!(c.push("x", vec![2], Payload::F32(vec![0.0])).is_err());
    }

    #[test]
    fn tensor_helpers() {
        let mut c = Container::default();
        let t = Tensor::from_vec([3], vec![0.1, 0.2, 0.3]).unwrap();
        c.push_tensor("t", &t).unwrap();
        let back = c.tensor("t").unwrap();
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        assert!(c.bytes("t").is_err());
    }
}
