//! Binary files of named `f64` tensors.
//!
//! Layout: 4 magic bytes, `u16` version, then records until end of file. A
//! record is `u32` name length, UTF-8 name, `u32` rank, `rank × u64` dims and
//! the values as little-endian `f64`. All integers are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Params, TensorMap};
use crate::tensor::Tensor;

pub const VERSION: u16 = 1;
pub const PARAMS_MAGIC: [u8; 4] = *b"GIAP";
pub const GENERATOR_MAGIC: [u8; 4] = *b"GIAG";
pub const ATTACK_MAGIC: [u8; 4] = *b"GIAA";

const MAX_RANK: usize = 8;

pub fn encode(magic: [u8; 4], map: &TensorMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + map.numel() * 8 + map.len() * 32);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in map.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: {what} at byte {} needs {n} bytes", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses a whole buffer; nothing is returned unless every record is intact.
pub fn decode(magic: [u8; 4], bytes: &[u8]) -> Result<TensorMap> {
    let mut c = Cursor { buf: bytes, pos: 0 };
    let m = c.take(4, "magic")?;
    if m != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(m),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = u16::from_le_bytes(c.take(2, "version")?.try_into().expect("2 bytes"));
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    let mut map = TensorMap::new();
    while c.pos < bytes.len() {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("tensor '{name}': unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64("dimension")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Format(format!("tensor '{name}': bad shape {shape:?}")))?;
        let raw = c.take(n.saturating_mul(8), "values")?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        if map.get(&name).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{name}'")));
        }
        map.insert(name, Tensor::new(shape, data)?);
    }
    Ok(map)
}

/// Writes via a temporary sibling file and a rename, so readers never see half a file.
pub fn write_file(path: &Path, magic: [u8; 4], map: &TensorMap) -> Result<()> {
    let bytes = encode(magic, map);
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: &Path, magic: [u8; 4]) -> Result<TensorMap> {
    let bytes = fs::read(path)?;
    decode(magic, &bytes)
}

pub fn save_params(path: &Path, params: &Params) -> Result<()> {
    write_file(path, PARAMS_MAGIC, params)
}

pub fn load_params(path: &Path) -> Result<Params> {
    read_file(path, PARAMS_MAGIC)
}

/// Saves parameters together with the records describing their model.
pub fn save_model(path: &Path, spec: &ModelSpec, params: &Params) -> Result<()> {
    let mut all = spec.to_records();
    for (name, t) in params.iter() {
        all.insert(name, t.clone());
    }
    write_file(path, PARAMS_MAGIC, &all)
}

/// Splits a file written by [`save_model`] back into spec and parameters.
pub fn load_model(path: &Path) -> Result<(ModelSpec, Params)> {
    let all = load_params(path)?;
    let spec = ModelSpec::from_records(&all)?;
    let mut params = Params::new();
    for (name, t) in all.iter() {
        if !name.starts_with("__") {
            params.insert(name, t.clone());
        }
    }
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("a.weight", Tensor::new(vec![2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -7.25]).unwrap());
        m.insert("a.bias", Tensor::from_vec(vec![0.1, 0.2]));
        m
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let m = sample();
        let back = decode(PARAMS_MAGIC, &encode(PARAMS_MAGIC, &m)).unwrap();
        for ((na, a), (nb, b)) in m.iter().zip(back.iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn truncation_inside_a_record_is_rejected() {
        let bytes = encode(PARAMS_MAGIC, &sample());
        for cut in [3, 5, 7, 12, bytes.len() - 1] {
            assert!(decode(PARAMS_MAGIC, &bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn unknown_version_and_magic() {
        let mut bytes = encode(PARAMS_MAGIC, &sample());
        bytes[4] = 9;
        assert!(matches!(decode(PARAMS_MAGIC, &bytes), Err(Error::Version { found: 9, .. })));
        let g = encode(GENERATOR_MAGIC, &sample());
        assert!(matches!(decode(PARAMS_MAGIC, &g), Err(Error::Format(_))));
    }
}
