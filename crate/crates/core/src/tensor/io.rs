//! Weight blobs: a little-endian `u64` extent count, the extents as `u64`,
//! then the values as little-endian `f32`.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub fn blob_len(t: &Tensor<f32>) -> usize {
    8 + 8 * t.rank() + 4 * t.len()
}

pub fn write_blob<W: Write>(w: &mut W, t: &Tensor<f32>) -> std::io::Result<()> {
    w.write_all(&(t.rank() as u64).to_le_bytes())?;
    for &e in t.shape() {
        w.write_all(&(e as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode_blob(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(blob_len(t));
    write_blob(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated blob header: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_blob<R: Read>(r: &mut R) -> Result<Tensor<f32>> {
    let rank = read_u64(r)? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u64(r).map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|e| Error::Format(format!("truncated blob body: {e}")))?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(shape, data)
}

pub fn decode_blob(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut cursor = bytes;
    read_blob(&mut cursor)
}
