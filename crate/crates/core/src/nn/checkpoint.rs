//! Binary parameter checkpoints.
//!
//! Layout: magic `STP4DCKP`, `u32` version, then records of
//! `u32` name length, UTF-8 name, `u32` rank, `u32` extents, little-endian
//! `f32` payload. All integers are little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"STP4DCKP";
pub const VERSION: u32 = 1;

pub fn write_records<'a>(out: &mut impl Write, records: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in records {
        let to_u32 = |v: usize| u32::try_from(v).map_err(|_| Error::Checkpoint(format!("`{name}` too large")));
        out.write_all(&to_u32(name.len())?.to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&to_u32(t.rank())?.to_le_bytes())?;
        for &e in t.shape() {
            out.write_all(&to_u32(e)?.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<Option<u32>> {
    let mut b = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut b[filled..])?;
        if n == 0 {
            return if filled == 0 { Ok(None) } else { Err(Error::Checkpoint("truncated record header".into())) };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(b)))
}

fn need_u32(r: &mut impl Read) -> Result<u32> {
    read_u32(r)?.ok_or_else(|| Error::Checkpoint("truncated record".into()))
}

pub fn read_records(r: &mut impl Read) -> Result<BTreeMap<String, Tensor>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = need_u32(r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = BTreeMap::new();
    while let Some(len) = read_u32(r)? {
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name).map_err(|_| Error::Checkpoint("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("name is not UTF-8".into()))?;
        let rank = need_u32(r)? as usize;
        let shape = (0..rank).map(|_| need_u32(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * 4];
        r.read_exact(&mut buf).map_err(|_| Error::Checkpoint(format!("truncated payload for `{name}`")))?;
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        if out.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate record `{name}`")));
        }
    }
    Ok(out)
}

pub fn save(path: impl AsRef<Path>, records: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_records(&mut w, records.iter().map(|(k, v)| (k.as_str(), v)))?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_records(&mut r)
}

/// Rounds every value to the nearest `f32` so that a saved and reloaded
/// tensor is bit-identical to the in-memory one.
pub fn round_f32(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = *v as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut m = BTreeMap::new();
        m.insert("a.weight".to_string(), Tensor::new([2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-3, 7.0]).unwrap());
        m.insert("s".to_string(), Tensor::scalar(4.0));
        let mut buf = Vec::new();
        write_records(&mut buf, m.iter().map(|(k, v)| (k.as_str(), v))).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = read_records(&mut buf.as_slice()).unwrap();
        assert_eq!(back["s"].data(), &[4.0]);
        assert_eq!(back["a.weight"].shape(), &[2, 3]);
        assert_eq!(back["a.weight"].data()[4], 1e-3f32 as f64);
    }

    #[test]
    fn truncated_is_rejected() {
        let mut m = BTreeMap::new();
        m.insert("x".to_string(), Tensor::ones([4]));
        let mut buf = Vec::new();
        write_records(&mut buf, m.iter().map(|(k, v)| (k.as_str(), v))).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_records(&mut buf.as_slice()).is_err());
    }
}
