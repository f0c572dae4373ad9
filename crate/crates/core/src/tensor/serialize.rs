//! `STNT` binary tensor format.
//!
//! Layout: magic `STNT`, version byte, rank byte, `rank` extents as u32 LE,
//! then the payload as row-major f32 LE.

use std::io::{Read, Write};

use super::{Result, Scalar, Tensor, TensorError};

pub const TENSOR_MAGIC: &[u8; 4] = b"STNT";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor<S: Scalar, W: Write>(w: &mut W, t: &Tensor<S>) -> Result<()> {
    w.write_all(&encode_tensor(t)?)?;
    Ok(())
}

pub fn encode_tensor<S: Scalar>(t: &Tensor<S>) -> Result<Vec<u8>> {
    if t.rank() > u8::MAX as usize {
        return Err(TensorError::Format(format!("rank {} exceeds 255", t.rank())));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| TensorError::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn read_tensor<S: Scalar, R: Read>(r: &mut R) -> Result<Tensor<S>> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)
        .map_err(|e| TensorError::Format(format!("truncated header: {e}")))?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic {:?}, expected STNT",
            &head[..4]
        )));
    }
    if head[4] != TENSOR_VERSION {
        return Err(TensorError::Format(format!(
            "unsupported version {}",
            head[4]
        )));
    }
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut buf = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut buf)
            .map_err(|e| TensorError::Format(format!("truncated extents: {e}")))?;
        shape.push(u32::from_le_bytes(buf) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    r.read_exact(&mut payload)
        .map_err(|e| TensorError::Format(format!("truncated payload: {e}")))?;
    let data = payload
        .chunks_exact(4)
        .map(|c| S::cast(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data).map_err(|e| TensorError::Format(e.to_string()))
}

pub fn decode_tensor<S: Scalar>(bytes: &[u8]) -> Result<Tensor<S>> {
    let mut cursor = bytes;
    let t = read_tensor(&mut cursor)?;
    if !cursor.is_empty() {
        return Err(TensorError::Format(format!(
            "{} trailing bytes after tensor",
            cursor.len()
        )));
    }
    Ok(t)
}
