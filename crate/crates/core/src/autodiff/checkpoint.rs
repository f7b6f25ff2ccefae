//! Named-tensor checkpoint container.
//!
//! All integers are little-endian `u32`:
//!
//! ```text
//! magic    8 bytes  "MCFCKPT\0"
//! version  u32      currently 1
//! count    u32      number of entries
//! entry*   name_len u32, name (UTF-8), rank u32, extents u32 * rank,
//!          values f32 LE * product(extents), row-major
//! ```

use std::io::{Read, Write};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MCFCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint(w: &mut impl Write, params: &ParamStore) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION as usize)?;
    put_u32(w, params.len())?;
    for (name, t) in params.iter() {
        put_u32(w, name.len())?;
        w.write_all(name.as_bytes())?;
        put_u32(w, t.rank())?;
        for &d in t.shape() {
            put_u32(w, d)?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&(x as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<ParamStore> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Checkpoint(format!(
            "version {version} is not supported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let count = get_u32(r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = get_u32(r)?;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("entry `{name}`: {e}")))?;
        store.insert(name, t);
    }
    Ok(store)
}

/// Writes `params` to a file.
pub fn save_checkpoint(path: impl AsRef<std::path::Path>, params: &ParamStore) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<ParamStore> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let mut p = ParamStore::new();
        p.insert("ab", Tensor::new(&[2], vec![1.0, -2.5]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &p).unwrap();
        let mut expected = b"MCFCKPT\0".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(1.0f32.to_le_bytes());
        expected.extend((-2.5f32).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn rejects_wrong_version() {
        let mut buf = b"MCFCKPT\0".to_vec();
        buf.extend(7u32.to_le_bytes());
        buf.extend(0u32.to_le_bytes());
        let err = read_checkpoint(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 7"));
    }

    #[test]
    fn rejects_bad_magic() {
        let err = read_checkpoint(&mut &b"NOTACKPT\x01\0\0\0\0\0\0\0"[..]).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }
}
