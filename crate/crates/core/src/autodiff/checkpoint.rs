//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DORI" | version: u32 | record*
//! record = name_len: u64 | name: utf-8 | rank: u64 | dims: u64 * rank | data: f64 * prod(dims)
//! ```
//!
//! Records run until end of file.

use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DORI";
pub const VERSION: u32 = 1;

pub fn write_params<W: Write>(mut w: W, params: &ParamSet) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (_, name, value) in params.iter() {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(value.rank() as u64).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in value.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_params(bytes: &[u8]) -> Result<ParamSet> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut names = Vec::new();
    let mut values = Vec::new();
    while cur.pos < bytes.len() {
        let name_len = cur.u64()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("parameter name is not utf-8: {e}")))?
            .to_string();
        let rank = cur.u64()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: implausible rank {rank}")));
        }
        let dims = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = cur.take(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        values.push(Tensor::new(dims, data)?);
        names.push(name);
    }
    Ok(ParamSet::from_parts(names, values))
}

pub fn save(path: &Path, params: &ParamSet) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_params(std::io::BufWriter::new(file), params).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_params(&bytes)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            blocks in proptest::collection::vec(
                (1usize..4, 1usize..4, proptest::collection::vec(any::<f64>(), 16)), 1..5)
        ) {
            let mut params = ParamSet::new();
            for (i, (r, c, vals)) in blocks.iter().enumerate() {
                let data = vals[..r * c].to_vec();
                params.insert(format!("block.{i}"), Tensor::matrix(*r, *c, data).unwrap());
            }
            let mut buf = Vec::new();
            write_params(&mut buf, &params).unwrap();
            let back = read_params(&buf).unwrap();
            prop_assert_eq!(back.len(), params.len());
            for ((_, n1, a), (_, n2, b)) in params.iter().zip(back.iter()) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(a.shape(), b.shape());
                let bits_a: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
                let bits_b: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn header_layout() {
        let mut params = ParamSet::new();
        params.insert("w", Tensor::scalar(1.5));
        let mut buf = Vec::new();
        write_params(&mut buf, &params).unwrap();
        assert_eq!(&buf[..4], b"DORI");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(buf[16], b'w');
        assert_eq!(&buf[17..25], &0u64.to_le_bytes());
        assert_eq!(&buf[25..33], &1.5f64.to_le_bytes());
        assert_eq!(buf.len(), 33);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(read_params(b"NOPE\x01\0\0\0"), Err(Error::Checkpoint(_))));
        let mut params = ParamSet::new();
        params.insert("w", Tensor::zeros(&[2, 2]));
        let mut buf = Vec::new();
        write_params(&mut buf, &params).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_params(&buf), Err(Error::Checkpoint(_))));
    }
}
