//! Binary checkpoint format.
//!
//! ```text
//! "SGC1" | version u32 | count u32 | count × tensor
//! tensor := name_len u16 | name (UTF-8) | rank u8 | rank × extent u32 | f32 data
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use sleepgate_tensor::Tensor;

use crate::error::{io_err, Error, Result};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"SGC1";
pub const VERSION: u32 = 1;

fn bad(field: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::Checkpoint { field: field.into(), detail: detail.into() }
}

pub fn encode(params: &ParamStore<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count = u32::try_from(params.len()).map_err(|_| bad("count", "too many tensors"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        if !t.is_finite() {
            return Err(bad(name, "non-finite value"));
        }
        let len = u16::try_from(name.len()).map_err(|_| bad(name, "name too long"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank()).map_err(|_| bad(name, "rank too large"))?;
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| bad(name, "extent too large"))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| bad(field, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore<f32>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(bad("magic", "not a checkpoint file"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(bad("version", format!("expected {VERSION}, found {version}")));
    }
    let count = r.u32("count")?;
    let mut params = ParamStore::new();
    for i in 0..count {
        let field = format!("tensor {i}");
        let len = u16::from_le_bytes(r.take(2, &field)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len, &field)?)
            .map_err(|_| bad(&field, "name is not UTF-8"))?
            .to_string();
        if params.get(&name).is_some() {
            return Err(bad(&name, "duplicate tensor name"));
        }
        let rank = r.take(1, &name)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let e = r.u32(&name)? as usize;
            n = n.checked_mul(e).ok_or_else(|| bad(&name, "element count overflows"))?;
            shape.push(e);
        }
        let nbytes = n.checked_mul(4).ok_or_else(|| bad(&name, "element count overflows"))?;
        let raw = r.take(nbytes, &name)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if data.iter().any(|x| !x.is_finite()) {
            return Err(bad(&name, "non-finite value"));
        }
        params.insert(name.clone(), Tensor::new(&shape, data).map_err(|e| bad(&name, e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(bad("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save(params: &ParamStore<f32>, path: &Path) -> Result<()> {
    let bytes = encode(params)?;
    fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

pub fn load(path: &Path) -> Result<ParamStore<f32>> {
    let bytes = fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert("base.a", Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-30, -0.0]).unwrap());
        p.insert("gate.b", Tensor::new(&[1], vec![7.0]).unwrap());
        p
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let a = encode(&sample()).unwrap();
        let back = decode(&a).unwrap();
        assert_eq!(encode(&back).unwrap(), a);
        let names: Vec<_> = back.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["base.a", "gate.b"]);
    }

    #[test]
    fn corrupted_magic_is_named() {
        let mut a = encode(&sample()).unwrap();
        a[0] = b'X';
        match decode(&a) {
            Err(Error::Checkpoint { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_truncation_rejected() {
        let mut a = encode(&sample()).unwrap();
        a[4] = 2;
        assert!(matches!(decode(&a), Err(Error::Checkpoint { field, .. }) if field == "version"));
        let a = encode(&sample()).unwrap();
        for cut in [3, 10, a.len() - 1] {
            assert!(decode(&a[..cut]).is_err());
        }
    }
}
