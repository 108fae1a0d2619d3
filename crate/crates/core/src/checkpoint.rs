//! Binary tensor-block checkpoint format, shared by every artifact.
//!
//! Layout: magic `CDL1`, u32 version (=1), u32 tensor count; then per tensor
//! a u16 name length, the UTF-8 name, a u8 rank, u64 dims, and the f32
//! payload. All integers and floats little-endian, payloads row-major.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CDL1";
const VERSION: u32 = 1;

/// Named tensors, sorted by name for a canonical byte layout.
#[derive(Debug, Default, Clone)]
pub struct TensorBlock {
    tensors: BTreeMap<String, Tensor>,
}

impl TensorBlock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Parse(format!("checkpoint is missing tensor '{name}'")))
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Parse(format!("checkpoint is missing tensor '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let name_bytes = name.as_bytes();
            if name_bytes.len() > u16::MAX as usize {
                return Err(Error::contract(format!("tensor name too long: {name}")));
            }
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            w.write_all(name_bytes)?;
            let rank = t.shape().len() as u8;
            w.write_all(&[rank])?;
            for &d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in t.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse("bad checkpoint magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u16(&mut r)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Parse(format!("tensor name not UTF-8: {e}")))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u64(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = vec![0.0f32; numel];
            let mut buf = [0u8; 4];
            for x in data.iter_mut() {
                r.read_exact(&mut buf)?;
                *x = f32::from_le_bytes(buf);
            }
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(TensorBlock { tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::pipeline::atomic_write(path, &buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path)?;
        Self::read_from(&bytes[..])
    }
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes() {
        let block = TensorBlock::new();
        let mut buf = Vec::new();
        block.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CDL1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &0u32.to_le_bytes());
    }

    #[test]
    fn round_trip_preserves_bits() {
        let mut block = TensorBlock::new();
        let mut rng = crate::rng::stream(5, "ckpt");
        block.insert("weights", Tensor::uniform(vec![3, 7], 2.0, &mut rng));
        block.insert("bias", Tensor::uniform(vec![7], 0.5, &mut rng));
        let mut buf = Vec::new();
        block.write_to(&mut buf).unwrap();
        let back = TensorBlock::read_from(&buf[..]).unwrap();
        assert_eq!(back.get("weights").unwrap(), block.get("weights").unwrap());
        assert_eq!(back.get("bias").unwrap(), block.get("bias").unwrap());
        // Canonical layout: re-serializing yields identical bytes.
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00";
        assert!(matches!(
            TensorBlock::read_from(&bytes[..]),
            Err(Error::Parse(_))
        ));
    }
}
