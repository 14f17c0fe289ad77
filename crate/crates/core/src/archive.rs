//! Named-tensor archive shared by checkpoints and embedding exports.
//!
//! Layout (little-endian): magic `TXNARCH1`, u32 format version, u32 header
//! length, UTF-8 JSON header, u32 tensor count, then per tensor: u16 name
//! length, name bytes, u32 rows, u32 cols, u8 dtype (0 = f32, 1 = f16),
//! and the row-major values.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use half::f16;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const ARCHIVE_MAGIC: &[u8; 8] = b"TXNARCH1";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Matrix<f32>)>,
}

impl Archive {
    pub fn new(header: serde_json::Value) -> Self {
        Archive {
            header,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, m: Matrix<f32>) {
        self.tensors.push((name.into(), m));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    /// Tensors whose names start with `prefix`, prefix removed.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Matrix<f32>)> {
        self.tensors
            .iter()
            .filter_map(|(n, m)| n.strip_prefix(prefix).map(|s| (s.to_string(), m.clone())))
            .collect()
    }

    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        let mut w = Vec::new();
        let header = serde_json::to_vec(&self.header)?;
        w.extend_from_slice(ARCHIVE_MAGIC);
        w.write_u32::<LittleEndian>(ARCHIVE_VERSION)
            .expect("vec write");
        w.write_u32::<LittleEndian>(header.len() as u32)
            .expect("vec write");
        w.extend_from_slice(&header);
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)
            .expect("vec write");
        for (name, m) in &self.tensors {
            if name.len() > u16::MAX as usize {
                return Err(Error::Invalid(format!("tensor name too long: {name}")));
            }
            w.write_u16::<LittleEndian>(name.len() as u16)
                .expect("vec write");
            w.extend_from_slice(name.as_bytes());
            w.write_u32::<LittleEndian>(m.rows as u32)
                .expect("vec write");
            w.write_u32::<LittleEndian>(m.cols as u32)
                .expect("vec write");
            match dtype {
                DType::F32 => {
                    w.push(0);
                    for &x in &m.data {
                        w.write_f32::<LittleEndian>(x).expect("vec write");
                    }
                }
                DType::F16 => {
                    w.push(1);
                    for &x in &m.data {
                        w.write_u16::<LittleEndian>(f16::from_f32(x).to_bits())
                            .expect("vec write");
                    }
                }
            }
        }
        Ok(w)
    }

    pub fn write(&self, path: &Path, dtype: DType) -> Result<()> {
        let bytes = self.to_bytes(dtype)?;
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(f)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format {
                path: path.to_path_buf(),
                reason,
            },
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            path: Default::default(),
            reason,
        };
        let eof = |_| bad("truncated archive".into());
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != ARCHIVE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        if r.len() < hlen {
            return Err(bad("truncated header".into()));
        }
        let header: serde_json::Value = serde_json::from_slice(&r[..hlen])?;
        r = &r[hlen..];
        let n = r.read_u32::<LittleEndian>().map_err(eof)?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let nl = r.read_u16::<LittleEndian>().map_err(eof)? as usize;
            if r.len() < nl {
                return Err(bad("truncated name".into()));
            }
            let name = String::from_utf8(r[..nl].to_vec()).map_err(|e| bad(e.to_string()))?;
            r = &r[nl..];
            let rows = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
            let cols = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
            let dtype = r.read_u8().map_err(eof)?;
            let count = rows * cols;
            let mut data = Vec::with_capacity(count);
            match dtype {
                0 => {
                    for _ in 0..count {
                        data.push(r.read_f32::<LittleEndian>().map_err(eof)?);
                    }
                }
                1 => {
                    for _ in 0..count {
                        data.push(
                            f16::from_bits(r.read_u16::<LittleEndian>().map_err(eof)?).to_f32(),
                        );
                    }
                }
                other => return Err(bad(format!("unknown dtype {other}"))),
            }
            tensors.push((name, Matrix::from_vec(rows, cols, data)));
        }
        Ok(Archive { header, tensors })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Archive {
        let mut a = Archive::new(serde_json::json!({"kind": "test", "n": 3}));
        a.push(
            "w",
            Matrix::from_vec(2, 3, vec![0.1, -2.5, 3.0, 1e-3, 7.25, -0.0]),
        );
        a.push("b", Matrix::from_vec(1, 1, vec![f32::MAX]));
        a
    }

    #[test]
    fn f32_round_trip_is_bit_exact() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes(DType::F32).unwrap()).unwrap();
        assert_eq!(a, b);
        let bits = |x: &Archive| {
            x.tensors
                .iter()
                .flat_map(|t| t.1.data.iter().map(|v| v.to_bits()))
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn f16_export_is_close() {
        let a = sample();
        let b = Archive::from_bytes(&a.to_bytes(DType::F16).unwrap()).unwrap();
        let w = b.get("w").unwrap();
        assert!((w.data[1] + 2.5).abs() < 1e-3);
        assert!((w.data[0] - 0.1).abs() < 1e-3);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Archive::from_bytes(b"nope").is_err());
        let mut bytes = sample().to_bytes(DType::F32).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(Archive::from_bytes(&bytes).is_err());
    }
}
