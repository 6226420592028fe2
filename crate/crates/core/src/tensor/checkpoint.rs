//! `DBW1` weight checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   b"DBW1"
//! version u16
//! repeated until EOF:
//!   name_len u32, name (UTF-8)
//!   rank u32, dims u32 × rank
//!   payload f64 × product(dims)
//! ```

use std::io::{self, Read, Write};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DBW1";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(
    mut w: W,
    records: &[(String, Tensor<T>)],
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_f64_lossy().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Vec<(String, Tensor<T>)>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a DBW1 checkpoint".into()));
    }
    let version = read_u16(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut out = Vec::new();
    loop {
        let name_len = match read_u32(&mut r) {
            Ok(n) => n as usize,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf)?;
        let data = buf
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub(crate) fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub(crate) fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_bytes() {
        let mut buf = Vec::new();
        write_checkpoint::<f64, _>(&mut buf, &[("a".into(), Tensor::scalar(1.5))]).unwrap();
        assert_eq!(&buf[..4], b"DBW1");
        assert_eq!(&buf[4..6], &[1, 0]);
        assert_eq!(&buf[6..10], &[1, 0, 0, 0]);
        assert_eq!(buf[10], b'a');
        assert_eq!(&buf[11..15], &[0, 0, 0, 0]);
        assert_eq!(&buf[15..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(read_checkpoint::<f64, _>(&b"DBW2\x01\x00"[..]).is_err());
        let mut buf = Vec::new();
        write_checkpoint::<f64, _>(&mut buf, &[("w".into(), Tensor::zeros(&[2, 2]))]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint::<f64, _>(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(records in proptest::collection::vec(
            ("[a-z.]{1,12}", proptest::collection::vec(1usize..4, 0..4)),
            0..5,
        ), seed in any::<u64>()) {
            let recs: Vec<(String, Tensor<f64>)> = records
                .into_iter()
                .enumerate()
                .map(|(k, (name, shape))| {
                    let t = Tensor::from_fn(&shape, |i| ((seed ^ (i as u64 * 31 + k as u64)) % 1000) as f64 / 7.0 - 50.0);
                    (name, t)
                })
                .collect();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &recs).unwrap();
            let back: Vec<(String, Tensor<f64>)> = read_checkpoint(&buf[..]).unwrap();
            prop_assert_eq!(back, recs);
        }
    }
}
