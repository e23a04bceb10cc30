//! Binary tensor files: `u64` rank, `rank × u64` extents, then row-major
//! `f64` data, all little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::tensor::Tensor;

const MAX_RANK: u64 = 8;

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> io::Result<()> {
    w.write_all(&(t.shape().len() as u64).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_tensor<R: Read>(mut r: R) -> io::Result<Tensor> {
    let bad = |msg: String| io::Error::new(io::ErrorKind::InvalidData, msg);
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let rank = u64::from_le_bytes(word);
    if rank == 0 || rank > MAX_RANK {
        return Err(bad(format!("unsupported tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    for _ in 0..rank {
        r.read_exact(&mut word)?;
        shape.push(u64::from_le_bytes(word) as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| bad("tensor extents overflow".into()))?;
    let mut bytes = vec![0u8; len * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> io::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let f = fs::File::create(path)?;
    write_tensor(io::BufWriter::new(f), t)
}

pub fn load_tensor(path: &Path) -> io::Result<Tensor> {
    let f = fs::File::open(path)?;
    read_tensor(io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 8 * 3 + 16);
        assert_eq!(&buf[0..8], &2u64.to_le_bytes());
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
        assert_eq!(&buf[16..24], &1u64.to_le_bytes());
        assert_eq!(&buf[24..32], &1.5f64.to_le_bytes());
    }

    #[test]
    fn truncated_input_errors() {
        let t = Tensor::zeros(&[3, 3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(read_tensor(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let len: usize = shape.iter().product();
            let data: Vec<f64> = (0..len).map(|i| ((seed as f64) * 1e-9 + i as f64).sin()).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&buf[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
