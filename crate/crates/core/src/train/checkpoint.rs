//! Binary checkpoints: `SPKT`, a little-endian `u32` version, then records of
//! `u32` name length, UTF-8 name, `u32` rank, `u64` extents and raw
//! little-endian `f64` values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SPKT";
pub const VERSION: u32 = 1;

pub fn encode_records(records: &[(String, Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for e in t.shape() {
            out.extend_from_slice(&(*e as u64).to_le_bytes());
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

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_records(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while c.pos < buf.len() {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::Checkpoint("record name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("`{name}`: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, b| a.checked_mul(*b))
            .filter(|n| n.checked_mul(8).is_some_and(|b| b <= buf.len()))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: implausible shape {shape:?}")))?;
        let raw = c.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

/// Writes via a temporary file and rename, so an existing checkpoint at
/// `path` is never left half-written.
pub fn write_records(path: impl AsRef<Path>, records: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode_records(records)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode_records(&buf)
}

/// Integers stored as exact `f64` values, 32 bits per element.
pub fn u64s_to_tensor(values: &[u64]) -> Tensor {
    let data: Vec<f64> = values
        .iter()
        .flat_map(|v| [(v >> 32) as f64, (v & 0xffff_ffff) as f64])
        .collect();
    Tensor::new(&[data.len()], data).expect("rank-1")
}

pub fn tensor_to_u64s(t: &Tensor) -> Result<Vec<u64>> {
    let d = t.data();
    if d.len() % 2 != 0 || d.iter().any(|v| v.fract() != 0.0 || *v < 0.0 || *v > u32::MAX as f64) {
        return Err(Error::Checkpoint("malformed integer record".into()));
    }
    Ok(d.chunks(2).map(|c| ((c[0] as u64) << 32) | c[1] as u64).collect())
}

pub fn bytes_to_tensor(b: &[u8]) -> Tensor {
    Tensor::new(&[b.len()], b.iter().map(|x| *x as f64).collect()).expect("rank-1")
}

pub fn tensor_to_bytes(t: &Tensor) -> Result<Vec<u8>> {
    t.data()
        .iter()
        .map(|v| {
            if v.fract() == 0.0 && (0.0..=255.0).contains(v) {
                Ok(*v as u8)
            } else {
                Err(Error::Checkpoint("malformed byte record".into()))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn header_layout() {
        let b = encode_records(&[("ab".into(), Tensor::new(&[2], vec![1.0, -0.5]).unwrap())]);
        assert_eq!(&b[..4], b"SPKT");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(&b[12..14], b"ab");
        assert_eq!(u32::from_le_bytes(b[14..18].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[18..26].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(b[26..34].try_into().unwrap()), 1.0);
        assert_eq!(b.len(), 42);
    }

    #[test]
    fn corrupt_input_rejected() {
        let good = encode_records(&[("x".into(), Tensor::zeros(&[3, 2]))]);
        assert!(decode_records(&good[..good.len() - 1]).is_err());
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(decode_records(&bad).is_err());
        let mut v2 = good;
        v2[4] = 9;
        assert!(decode_records(&v2).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.spkt");
        let recs = vec![("s".to_string(), Tensor::scalar(f64::MIN_POSITIVE))];
        write_records(&p, &recs).unwrap();
        assert_eq!(read_records(&p).unwrap(), recs);
        assert!(read_records(dir.path().join("missing")).is_err());
    }

    proptest! {
        #[test]
        fn records_roundtrip_bitwise(vals in proptest::collection::vec(any::<f64>(), 0..40), ints in proptest::collection::vec(any::<u64>(), 0..5)) {
            let recs = vec![
                ("a.w".to_string(), Tensor::new(&[vals.len()], vals.clone()).unwrap()),
                ("ints".to_string(), u64s_to_tensor(&ints)),
            ];
            let back = decode_records(&encode_records(&recs)).unwrap();
            prop_assert_eq!(back.len(), 2);
            for (a, b) in back[0].1.data().iter().zip(&vals) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(tensor_to_u64s(&back[1].1).unwrap(), ints);
        }
    }
}
