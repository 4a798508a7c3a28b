//! Named-array checkpoint file.
//!
//! ```text
//! "ATMV" | u32 version | u32 array count
//! per array (sorted by name):
//!     u16 name length | UTF-8 name | u8 dtype (0 = f32, 1 = i64) | u8 rank
//!     | u32 dims[rank] | little-endian payload
//! u32 CRC32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ATMV";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    I64(Vec<i64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::I64(v) => v.len(),
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ArrayData::F32(_) => 0,
            ArrayData::I64(_) => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn f32(shape: &[usize], data: Vec<f32>) -> Self {
        Self {
            shape: shape.to_vec(),
            data: ArrayData::F32(data),
        }
    }

    pub fn i64(shape: &[usize], data: Vec<i64>) -> Self {
        Self {
            shape: shape.to_vec(),
            data: ArrayData::I64(data),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            ArrayData::F32(v) => Some(v),
            ArrayData::I64(_) => None,
        }
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            ArrayData::I64(v) => Some(v),
            ArrayData::F32(_) => None,
        }
    }
}

/// Named arrays; the map keeps them in the canonical lexicographic order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub arrays: BTreeMap<String, Array>,
}

impl Checkpoint {
    pub fn insert(&mut self, name: impl Into<String>, array: Array) {
        self.arrays.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Result<&Array> {
        self.arrays.get(name).ok_or_else(|| Error::Data(format!("checkpoint lacks array {name}")))
    }

    /// Stores `bytes` as an i64 array, one byte per element.
    pub fn insert_bytes(&mut self, name: impl Into<String>, bytes: &[u8]) {
        let data: Vec<i64> = bytes.iter().map(|&b| b as i64).collect();
        self.insert(name, Array::i64(&[data.len()], data));
    }

    pub fn get_bytes(&self, name: &str) -> Result<Vec<u8>> {
        let arr = self.get(name)?;
        let vals = arr
            .as_i64()
            .ok_or_else(|| Error::Data(format!("{name} is not an i64 array")))?;
        vals.iter()
            .map(|&v| u8::try_from(v).map_err(|_| Error::Data(format!("{name} holds non-byte value {v}"))))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&u32_of(self.arrays.len(), "array count")?.to_le_bytes());
        for (name, arr) in &self.arrays {
            let n: usize = arr.shape.iter().product();
            if n != arr.data.len() {
                return Err(Error::Invariant(format!(
                    "array {name}: shape {:?} vs {} values",
                    arr.shape,
                    arr.data.len()
                )));
            }
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Invariant(format!("array name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(arr.data.tag());
            out.push(
                u8::try_from(arr.shape.len())
                    .map_err(|_| Error::Invariant(format!("array {name} rank too large")))?,
            );
            for &d in &arr.shape {
                out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
            }
            match &arr.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.error_at(0, "bad magic, not a checkpoint"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.error_at(4, &format!("unsupported format version {version}")));
        }
        let count = r.u32()? as usize;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let start = r.pos;
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.error_at(start + 2, "array name is not UTF-8"))?
                .to_string();
            let tag_pos = r.pos;
            let tag = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| r.error_at(tag_pos, "array size overflows"))?;
            let data = match tag {
                0 => ArrayData::F32(
                    r.take(n.checked_mul(4).ok_or_else(|| r.error_at(tag_pos, "array size overflows"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                ),
                1 => ArrayData::I64(
                    r.take(n.checked_mul(8).ok_or_else(|| r.error_at(tag_pos, "array size overflows"))?)?
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                ),
                other => return Err(r.error_at(tag_pos, &format!("unknown dtype tag {other}"))),
            };
            if let Some(prev) = arrays.keys().next_back() {
                if &name <= prev {
                    return Err(r.error_at(start, &format!("array {name} out of canonical order")));
                }
            }
            arrays.insert(name, Array { shape, data });
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        if r.pos != bytes.len() {
            return Err(r.error_at(r.pos, "trailing bytes after checksum"));
        }
        let crc = crc32fast::hash(&bytes[..body_end]);
        if crc != stored {
            return Err(r.error_at(body_end, &format!("checksum mismatch: stored {stored:08x}, computed {crc:08x}")));
        }
        Ok(Checkpoint { arrays })
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Invariant(format!("{what} {v} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error_at(&self, offset: usize, detail: &str) -> Error {
        Error::Checkpoint {
            offset,
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error_at(
                self.pos,
                &format!("truncated: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            ));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    Checkpoint::from_bytes(&bytes)
}
