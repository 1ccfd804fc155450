//! Flat binary parameter checkpoints.
//!
//! Layout (all little-endian): `u32` tensor count, then per tensor `u32` rank,
//! `rank` x `u32` dims and the `f64` payload in row-major order.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn write_checkpoint<W: Write>(mut w: W, params: &[Tensor]) -> Result<usize> {
    let mut elements = 0;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        w.write_all(&(p.rank() as u32).to_le_bytes())?;
        for &d in p.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in p.data() {
            w.write_all(&v.to_le_bytes())?;
            elements += 1;
        }
    }
    Ok(elements)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<Tensor>> {
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(Error::parse("checkpoint", format!("rank {rank} too large")));
        }
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(Tensor::new(shape, data)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let ps = vec![
            Tensor::from_fn(&[2, 3], |i| i as f64 - 1.5),
            Tensor::scalar(7.25),
            Tensor::from_fn(&[2, 1, 2], |i| 1.0 / (i + 1) as f64),
        ];
        let mut buf = Vec::new();
        let n = write_checkpoint(&mut buf, &ps).unwrap();
        assert_eq!(n, 11);
        assert_eq!(&buf[..4], &3u32.to_le_bytes());
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), ps);
        assert!(read_checkpoint(&buf[..buf.len() - 1]).is_err());
    }
}
