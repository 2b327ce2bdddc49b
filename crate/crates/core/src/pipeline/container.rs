//! The S2T1 tensor container.
//!
//! Layout, all integers little-endian: magic `S2T1`, u32 version (1), u32
//! entry count, then per entry a u16 name length, the UTF-8 name, a u8 dtype
//! (0 = f32, 1 = f64, 2 = i64), a u8 rank, `rank` u64 dims and the raw
//! payload. Decoding validates the whole buffer before returning anything.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"S2T1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
}

impl TensorData {
    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::I64(_) => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

/// An ordered list of uniquely named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    entries: Vec<Entry>,
}

fn corrupt(field: &'static str, reason: impl Into<String>) -> Error {
    Error::CorruptCheckpoint {
        field,
        reason: reason.into(),
    }
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Appends an entry; names must be unique and fit in a u16.
    pub fn push(&mut self, name: &str, dims: &[usize], data: TensorData) -> Result<()> {
        if name.len() > usize::from(u16::MAX) {
            return Err(Error::invalid("name", "longer than 65535 bytes"));
        }
        if dims.len() > usize::from(u8::MAX) {
            return Err(Error::invalid("dims", "rank above 255"));
        }
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::invalid("dims", format!("`{name}`: dims {dims:?} do not match {} values", data.len())));
        }
        if self.get(name).is_some() {
            return Err(Error::invalid("name", format!("duplicate entry `{name}`")));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            dims: dims.to_vec(),
            data,
        });
        Ok(())
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) -> Result<()> {
        self.push(name, t.dims(), TensorData::F64(t.data().to_vec()))
    }

    pub fn push_f64(&mut self, name: &str, v: f64) -> Result<()> {
        self.push(name, &[], TensorData::F64(vec![v]))
    }

    pub fn push_i64(&mut self, name: &str, v: i64) -> Result<()> {
        self.push(name, &[], TensorData::I64(vec![v]))
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name)
            .ok_or_else(|| corrupt("entry", format!("missing entry `{name}`")))
    }

    /// A float entry widened to f64.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let e = self.require(name)?;
        let data = match &e.data {
            TensorData::F64(v) => v.clone(),
            TensorData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            TensorData::I64(_) => return Err(corrupt("dtype", format!("`{name}` is integer, expected float"))),
        };
        Tensor::new(&e.dims, data)
    }

    pub fn i64s(&self, name: &str) -> Result<&[i64]> {
        match &self.require(name)?.data {
            TensorData::I64(v) => Ok(v),
            _ => Err(corrupt("dtype", format!("`{name}` is float, expected integer"))),
        }
    }

    pub fn scalar_f64(&self, name: &str) -> Result<f64> {
        let t = self.tensor(name)?;
        match t.data() {
            [v] => Ok(*v),
            _ => Err(corrupt("dims", format!("`{name}` is not a scalar"))),
        }
    }

    pub fn scalar_i64(&self, name: &str) -> Result<i64> {
        match self.i64s(name)? {
            [v] => Ok(*v),
            _ => Err(corrupt("dims", format!("`{name}` is not a scalar"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.data.dtype());
            out.push(e.dims.len() as u8);
            for &d in &e.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(corrupt("magic", "not an S2T1 container"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("entry_count")?;
        let mut c = Container::new();
        for _ in 0..count {
            let name_len = usize::from(r.u16("name_length")?);
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| corrupt("name", "invalid UTF-8"))?
                .to_string();
            let dtype = r.u8("dtype")?;
            let elem = match dtype {
                0 => 4,
                1 | 2 => 8,
                d => return Err(corrupt("dtype", format!("`{name}`: unknown dtype {d}"))),
            };
            let ndim = usize::from(r.u8("ndim")?);
            let mut dims = Vec::with_capacity(ndim);
            let mut n: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64("dims")?).map_err(|_| corrupt("dims", "dimension overflows usize"))?;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| corrupt("dims", format!("`{name}`: element count overflows")))?;
                dims.push(d);
            }
            let nbytes = n
                .checked_mul(elem)
                .ok_or_else(|| corrupt("dims", format!("`{name}`: payload size overflows")))?;
            let raw = r.take(nbytes, "payload")?;
            let data = match dtype {
                0 => TensorData::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect()),
                1 => TensorData::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect()),
                _ => TensorData::I64(raw.chunks_exact(8).map(|b| i64::from_le_bytes(b.try_into().expect("8 bytes"))).collect()),
            };
            if c.get(&name).is_some() {
                return Err(corrupt("name", format!("duplicate entry `{name}`")));
            }
            c.entries.push(Entry { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(corrupt("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            corrupt(
                field,
                format!("truncated: need {n} bytes at offset {}, {} left", self.pos, self.bytes.len() - self.pos),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}
