//! Named-tensor container used for per-utterance feature bundles and
//! converted outputs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    b"PVC1"
//! version  u32
//! count    u32
//! count × { name_len u16, name utf-8, dtype u8, ndim u8, dims u32 × ndim,
//!           offset u64, byte_len u64 }
//! payload  (offsets are relative to the start of the payload)
//! ```
//!
//! dtype 0 = f32, 1 = i32, 2 = utf-8 text (ndim 0).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PVC1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    I32 { shape: Vec<usize>, data: Vec<i32> },
    Text(String),
}

impl Field {
    fn dtype(&self) -> u8 {
        match self {
            Field::F32 { .. } => 0,
            Field::I32 { .. } => 1,
            Field::Text(_) => 2,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            Field::F32 { shape, .. } | Field::I32 { shape, .. } => shape,
            Field::Text(_) => &[],
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            Field::F32 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Field::I32 { data, .. } => data.iter().flat_map(|v| v.to_le_bytes()).collect(),
            Field::Text(s) => s.as_bytes().to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub fields: Vec<(String, Field)>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, field: Field) {
        self.fields.push((name.to_string(), field));
    }

    pub fn push_f32(&mut self, name: &str, shape: Vec<usize>, data: impl IntoIterator<Item = f64>) {
        let data: Vec<f32> = data.into_iter().map(|v| v as f32).collect();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "field {name} shape");
        self.push(name, Field::F32 { shape, data });
    }

    pub fn push_text(&mut self, name: &str, text: impl Into<String>) {
        self.push(name, Field::Text(text.into()));
    }

    pub fn get(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|(n, _)| n == name).map(|(_, f)| f)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payloads: Vec<Vec<u8>> = self.fields.iter().map(|(_, f)| f.payload()).collect();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.fields.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for ((name, field), payload) in self.fields.iter().zip(&payloads) {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(field.dtype());
            out.push(field.shape().len() as u8);
            for &d in field.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            offset += payload.len() as u64;
        }
        for p in payloads {
            out.extend_from_slice(&p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, "field name is not utf-8"))?
                .to_string();
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            table.push((name, dtype, shape, offset, len));
        }
        let payload = &bytes[r.pos..];
        let mut fields = Vec::with_capacity(count);
        for (name, dtype, shape, offset, len) in table {
            let raw = payload
                .get(offset..offset + len)
                .ok_or_else(|| Error::format(path, format!("field {name} out of bounds")))?;
            let numel: usize = shape.iter().product();
            let field = match dtype {
                0 | 1 if numel * 4 != len => {
                    return Err(Error::format(path, format!("field {name} size mismatch")))
                }
                0 => Field::F32 {
                    shape,
                    data: raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                },
                1 => Field::I32 {
                    shape,
                    data: raw
                        .chunks_exact(4)
                        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect(),
                },
                2 => Field::Text(
                    String::from_utf8(raw.to_vec())
                        .map_err(|_| Error::format(path, format!("field {name} is not utf-8")))?,
                ),
                other => return Err(Error::format(path, format!("unknown dtype {other}"))),
            };
            fields.push((name, field));
        }
        Ok(Self { fields })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }

    pub fn f32_field(&self, name: &str, path: &Path) -> Result<(&[usize], &[f32])> {
        match self.get(name) {
            Some(Field::F32 { shape, data }) => Ok((shape, data)),
            _ => Err(Error::format(path, format!("missing f32 field {name}"))),
        }
    }

    pub fn i32_field(&self, name: &str, path: &Path) -> Result<(&[usize], &[i32])> {
        match self.get(name) {
            Some(Field::I32 { shape, data }) => Ok((shape, data)),
            _ => Err(Error::format(path, format!("missing i32 field {name}"))),
        }
    }

    pub fn text_field(&self, name: &str, path: &Path) -> Result<&str> {
        match self.get(name) {
            Some(Field::Text(s)) => Ok(s),
            _ => Err(Error::format(path, format!("missing text field {name}"))),
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(self.path, "truncated header"))?;
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}
