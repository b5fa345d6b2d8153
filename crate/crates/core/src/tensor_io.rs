//! Raw tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MXQT" | version: u8 | rank: u8 | rank x u32 dims | prod(dims) x f32 elements (row-major)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::Tensor;

pub const MAGIC: &[u8; 4] = b"MXQT";
pub const VERSION: u8 = 1;

/// Encoded size in bytes of a tensor with the given shape.
pub fn encoded_len(shape: &[usize]) -> usize {
    4 + 1 + 1 + 4 * shape.len() + 4 * shape.iter().product::<usize>()
}

/// Serializes `t`, narrowing elements to `f32`.
pub fn encode(t: &Tensor, out: &mut impl Write) -> std::io::Result<()> {
    let rank = u8::try_from(t.shape().len())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255"))?;
    out.write_all(MAGIC)?;
    out.write_all(&[VERSION, rank])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u32")
        })?;
        out.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(4 * t.len());
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

pub fn to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(encoded_len(t.shape()));
    encode(t, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Decodes one tensor from the front of `bytes`, returning it and the bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut cur = bytes;
    let mut header = [0u8; 6];
    cur.read_exact(&mut header)
        .map_err(|_| Error::parse("truncated tensor header"))?;
    if &header[..4] != MAGIC {
        return Err(Error::parse(format!("bad magic {:?}", &header[..4])));
    }
    if header[4] != VERSION {
        return Err(Error::parse(format!(
            "unsupported tensor format version {}",
            header[4]
        )));
    }
    let rank = header[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 4];
        cur.read_exact(&mut d)
            .map_err(|_| Error::parse("truncated tensor dims"))?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    if rank == 0 || shape.contains(&0) {
        return Err(Error::parse(format!("invalid tensor shape {shape:?}")));
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::parse("tensor element count overflows"))?;
    let need = n
        .checked_mul(4)
        .ok_or_else(|| Error::parse("tensor byte length overflows"))?;
    if cur.len() < need {
        return Err(Error::parse(format!(
            "tensor payload truncated: need {need} bytes, have {}",
            cur.len()
        )));
    }
    let data = cur[..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let used = bytes.len() - cur.len() + need;
    let t = Tensor::new(data, shape).map_err(|e| Error::parse(e.to_string()))?;
    Ok((t, used))
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode(&bytes)?;
    if used != bytes.len() {
        return Err(Error::parse(format!(
            "{}: {} trailing bytes after tensor",
            path.display(),
            bytes.len() - used
        )));
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![1.0, -2.5, 0.0, 3.25, 4.0, 5.0], vec![2, 3]).unwrap();
        let b = to_bytes(&t);
        assert_eq!(&b[..4], b"MXQT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &3u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(&b[18..22], &(-2.5f32).to_le_bytes());
        assert_eq!(b.len(), encoded_len(&[2, 3]));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let t = Tensor::new(vec![1.0; 4], vec![4]).unwrap();
        let good = to_bytes(&t);
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Parse(_))));
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(decode(&bad_version).is_err());
        assert!(decode(&good[..good.len() - 1]).is_err());
        assert!(decode(&good[..3]).is_err());
        let mut nan = good.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(decode(&nan).is_err());
    }

    proptest! {
        #[test]
        fn f32_exact_values_round_trip(v in prop::collection::vec(-1e6f32..1e6, 1..40)) {
            let data: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            let t = Tensor::new(data, vec![v.len()]).unwrap();
            let (back, used) = decode(&to_bytes(&t)).unwrap();
            prop_assert_eq!(used, encoded_len(t.shape()));
            prop_assert_eq!(back, t);
        }
    }
}
