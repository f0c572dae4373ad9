//! `STNV` clip files and uniform frame sampling.
//!
//! Layout: magic `STNV`, version byte, extents `(3, T, H, W)` as u32 LE, then
//! the payload as row-major f32 LE.

use std::path::Path;

use crate::tensor::{Scalar, Tensor, TensorError};
use crate::{io, Error, Result};

pub const CLIP_MAGIC: &[u8; 4] = b"STNV";
pub const CLIP_VERSION: u8 = 1;

pub fn encode_clip(clip: &Tensor<f32>) -> Result<Vec<u8>> {
    check_clip_shape(clip.shape())?;
    let mut out = Vec::with_capacity(5 + 16 + 4 * clip.len());
    out.extend_from_slice(CLIP_MAGIC);
    out.push(CLIP_VERSION);
    for &d in clip.shape() {
        let d = u32::try_from(d).map_err(|_| Error::ShapeMismatch(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in clip.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_clip(bytes: &[u8]) -> Result<Tensor<f32>> {
    let bad = |m: String| Error::Tensor(TensorError::Format(m));
    if bytes.len() < 21 {
        return Err(bad("clip file shorter than its header".into()));
    }
    if &bytes[..4] != CLIP_MAGIC {
        return Err(bad(format!("bad magic {:?}, expected STNV", &bytes[..4])));
    }
    if bytes[4] != CLIP_VERSION {
        return Err(bad(format!("unsupported clip version {}", bytes[4])));
    }
    let shape: Vec<usize> = bytes[5..21]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    check_clip_shape(&shape).map_err(|e| bad(e.to_string()))?;
    let n: usize = shape.iter().product();
    let payload = &bytes[21..];
    if payload.len() != 4 * n {
        return Err(bad(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Tensor::new(shape, data)?)
}

pub fn write_clip(path: &Path, clip: &Tensor<f32>) -> Result<()> {
    io::atomic_write(path, &encode_clip(clip)?)
}

pub fn read_clip(path: &Path) -> Result<Tensor<f32>> {
    decode_clip(&io::read_bytes(path)?)
}

/// Reads only the header and returns the clip shape.
pub fn peek_clip_shape(path: &Path) -> Result<[usize; 4]> {
    use std::io::Read;
    let mut head = [0u8; 21];
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    f.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    if &head[..4] != CLIP_MAGIC || head[4] != CLIP_VERSION {
        return Err(Error::Tensor(TensorError::Format(format!(
            "{} is not a version {CLIP_VERSION} STNV clip",
            path.display()
        ))));
    }
    let mut s = [0usize; 4];
    for (i, c) in head[5..21].chunks_exact(4).enumerate() {
        s[i] = u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize;
    }
    Ok(s)
}

fn check_clip_shape(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[0] != 3 || shape.contains(&0) {
        return Err(Error::ShapeMismatch(format!(
            "clip must be [3, T, H, W] with positive extents, got {shape:?}"
        )));
    }
    Ok(())
}

/// `k` indices spread uniformly over `0..len`: `round(i (len-1) / (k-1))`,
/// halves rounded up.
pub fn sample_indices(len: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > len {
        return Err(Error::Argument(format!(
            "cannot sample {k} frames from a sequence of {len}"
        )));
    }
    if k == 1 {
        return Ok(vec![0]);
    }
    let (num, den) = (len - 1, k - 1);
    Ok((0..k).map(|i| (2 * i * num + den) / (2 * den)).collect())
}

/// Frames of `clip` at `indices`, in order.
pub fn select_frames<S: Scalar>(clip: &Tensor<S>, indices: &[usize]) -> Result<Tensor<S>> {
    let s = clip.shape();
    check_clip_shape(s)?;
    let (c, t, plane) = (s[0], s[1], s[2] * s[3]);
    if let Some(&bad) = indices.iter().find(|&&i| i >= t) {
        return Err(Error::Argument(format!("frame index {bad} out of range for {t} frames")));
    }
    let mut data = Vec::with_capacity(c * indices.len() * plane);
    for ch in 0..c {
        for &i in indices {
            let o = (ch * t + i) * plane;
            data.extend_from_slice(&clip.data()[o..o + plane]);
        }
    }
    Ok(Tensor::new(vec![c, indices.len(), s[2], s[3]], data)?)
}

/// Uniformly samples `k` frames, returning the short clip and the index map
/// back into the original sequence.
pub fn sample_frames<S: Scalar>(clip: &Tensor<S>, k: usize) -> Result<(Tensor<S>, Vec<usize>)> {
    check_clip_shape(clip.shape())?;
    let idx = sample_indices(clip.shape()[1], k)?;
    Ok((select_frames(clip, &idx)?, idx))
}
