//! BTF: a minimal binary tensor format, plus a named-section archive.
//!
//! One tensor per blob:
//!   magic  "BTF1"
//!   dtype  u8       1 = f64 (little-endian), 2 = u8
//!   ndim   u8
//!   dims   ndim x u64 LE
//!   data   row-major payload, no padding
//!
//! Archive (used for calibration references and checkpoints):
//!   magic    "BTFA"
//!   version  u8 (currently 1)
//!   count    u32 LE
//!   sections count x { name_len u16 LE, name bytes, blob_len u64 LE, blob }
//!
//! Section order is preserved on write and round-trips exactly, which is what
//! makes re-runs byte-identical.

use crate::error::{BeraError, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};

const MAGIC_TENSOR: &[u8; 4] = b"BTF1";
const MAGIC_ARCHIVE: &[u8; 4] = b"BTFA";
const ARCHIVE_VERSION: u8 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_U8: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U8 { shape: Vec<usize>, data: Vec<u8> },
}

impl Payload {
    pub fn from_tensor(t: &Tensor) -> Payload {
        Payload::F64 {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self {
            Payload::F64 { shape, data } => Tensor::new(shape, data),
            Payload::U8 { .. } => Err(BeraError::CorruptFile(
                "expected f64 tensor, found u8".into(),
            )),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Payload::F64 { shape, .. } => shape,
            Payload::U8 { shape, .. } => shape,
        }
    }
}

fn write_header(out: &mut Vec<u8>, dtype: u8, shape: &[usize]) {
    out.extend_from_slice(MAGIC_TENSOR);
    out.push(dtype);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

pub fn encode_tensor(p: &Payload) -> Vec<u8> {
    let mut out = Vec::new();
    match p {
        Payload::F64 { shape, data } => {
            write_header(&mut out, DTYPE_F64, shape);
            out.reserve(data.len() * 8);
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Payload::U8 { shape, data } => {
            write_header(&mut out, DTYPE_U8, shape);
            out.extend_from_slice(data);
        }
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Payload> {
    let mut r = Cursor { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC_TENSOR {
        return Err(BeraError::CorruptFile(format!(
            "bad tensor magic {:?}",
            &magic[..magic.len().min(4)]
        )));
    }
    let dtype = r.u8()?;
    let ndim = r.u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    let mut total: usize = 1;
    for _ in 0..ndim {
        let d = r.u64()? as usize;
        total = total
            .checked_mul(d)
            .ok_or_else(|| BeraError::CorruptFile("tensor extent overflow".into()))?;
        shape.push(d);
    }
    match dtype {
        DTYPE_F64 => {
            let raw = r.take(total * 8)?;
            let mut data = Vec::with_capacity(total);
            for chunk in raw.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
            r.expect_end()?;
            Ok(Payload::F64 { shape, data })
        }
        DTYPE_U8 => {
            let raw = r.take(total)?;
            let data = raw.to_vec();
            r.expect_end()?;
            Ok(Payload::U8 { shape, data })
        }
        other => Err(BeraError::CorruptFile(format!(
            "unknown tensor dtype {}",
            other
        ))),
    }
}

/// Ordered named-tensor archive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    sections: Vec<(String, Payload)>,
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn push(&mut self, name: &str, payload: Payload) {
        self.sections.push((name.to_string(), payload));
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) {
        self.push(name, Payload::from_tensor(t));
    }

    pub fn get(&self, name: &str) -> Option<&Payload> {
        self.sections
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
    }

    pub fn require(&self, name: &str) -> Result<&Payload> {
        self.get(name)
            .ok_or_else(|| BeraError::CorruptFile(format!("archive missing section '{}'", name)))
    }

    pub fn names(&self) -> Vec<&str> {
        self.sections.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC_ARCHIVE);
        out.push(ARCHIVE_VERSION);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            let blob = encode_tensor(payload);
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Archive> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC_ARCHIVE {
            return Err(BeraError::CorruptFile("bad archive magic".into()));
        }
        let version = r.u8()?;
        if version != ARCHIVE_VERSION {
            return Err(BeraError::CorruptFile(format!(
                "unsupported archive version {}",
                version
            )));
        }
        let count = r.u32()? as usize;
        let mut sections = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| BeraError::CorruptFile("section name not utf-8".into()))?
                .to_string();
            let blob_len = r.u64()? as usize;
            let blob = r.take(blob_len)?;
            sections.push((name, decode_tensor(blob)?));
        }
        r.expect_end()?;
        Ok(Archive { sections })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Archive> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Archive::decode(&bytes).map_err(|e| match e {
            BeraError::CorruptFile(msg) => {
                BeraError::CorruptFile(format!("{}: {}", path.display(), msg))
            }
            other => other,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(BeraError::CorruptFile(format!(
                "truncated: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn expect_end(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(BeraError::CorruptFile(format!(
                "{} trailing bytes",
                self.bytes.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_f64_layout_is_exact() {
        let p = Payload::F64 {
            shape: vec![],
            data: vec![1.0],
        };
        let bytes = encode_tensor(&p);
        // "BTF1", dtype 1, ndim 0, then 1.0f64 LE.
        let mut want = b"BTF1\x01\x00".to_vec();
        want.extend_from_slice(&1.0f64.to_le_bytes());
        assert_eq!(bytes, want);
        assert_eq!(decode_tensor(&bytes).unwrap(), p);
    }

    #[test]
    fn u8_matrix_roundtrip() {
        let p = Payload::U8 {
            shape: vec![2, 3],
            data: vec![0, 1, 2, 3, 4, 255],
        };
        let bytes = encode_tensor(&p);
        assert_eq!(bytes.len(), 4 + 1 + 1 + 16 + 6);
        assert_eq!(decode_tensor(&bytes).unwrap(), p);
    }

    #[test]
    fn truncation_and_trailing_are_corrupt() {
        let p = Payload::F64 {
            shape: vec![4],
            data: vec![0.5; 4],
        };
        let bytes = encode_tensor(&p);
        assert!(matches!(
            decode_tensor(&bytes[..bytes.len() - 1]),
            Err(BeraError::CorruptFile(_))
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(
            decode_tensor(&extra),
            Err(BeraError::CorruptFile(_))
        ));
        let mut bad_magic = bytes;
        bad_magic[0] = b'X';
        assert!(decode_tensor(&bad_magic).is_err());
    }

    #[test]
    fn archive_preserves_order_and_bytes() {
        let mut a = Archive::new();
        a.push(
            "mu",
            Payload::F64 {
                shape: vec![3],
                data: vec![1.0, 2.0, 3.0],
            },
        );
        a.push(
            "sigma_lower",
            Payload::F64 {
                shape: vec![3, 3],
                data: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            },
        );
        a.push(
            "scalars",
            Payload::F64 {
                shape: vec![2],
                data: vec![0.05, 42.0],
            },
        );
        let bytes = a.encode();
        let b = Archive::decode(&bytes).unwrap();
        assert_eq!(b.names(), vec!["mu", "sigma_lower", "scalars"]);
        assert_eq!(a, b);
        assert_eq!(b.encode(), bytes);
        assert!(b.require("mu").is_ok());
        assert!(b.require("missing").is_err());
    }

    #[test]
    fn archive_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.btfa");
        let mut a = Archive::new();
        a.push(
            "w",
            Payload::F64 {
                shape: vec![2, 2],
                data: vec![1.0, -1.0, 0.5, 0.25],
            },
        );
        a.save(&path).unwrap();
        let b = Archive::load(&path).unwrap();
        assert_eq!(a, b);
    }
}
