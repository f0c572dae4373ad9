//! Checkpoint container.
//!
//! Layout: magic `STCK`, version byte, u32 LE header length, a JSON header
//! (model config, seed, tensor names and shapes), then every tensor as a
//! `STNT` record in header order. Parameters come first, then each batch-norm
//! layer's running mean and variance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnyModel, ModelConfig, VideoModel};
use crate::tensor::serialize::{encode_tensor, read_tensor};
use crate::tensor::Tensor;
use crate::{io, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STCK";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    seed: u64,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

fn named_tensors(model: &AnyModel) -> Vec<(String, Tensor<f32>)> {
    let p = model.params();
    let mut out: Vec<(String, Tensor<f32>)> = p
        .names()
        .iter()
        .cloned()
        .zip(p.values().iter().cloned())
        .collect();
    for (i, r) in model.running().iter().enumerate() {
        let c = r.mean.len();
        out.push((
            format!("bn{i}.running_mean"),
            Tensor::new(vec![c], r.mean.clone()).expect("channel vector"),
        ));
        out.push((
            format!("bn{i}.running_var"),
            Tensor::new(vec![c], r.var.clone()).expect("channel vector"),
        ));
    }
    out
}

pub fn write_checkpoint(model: &AnyModel) -> Result<Vec<u8>> {
    let tensors = named_tensors(model);
    let header = Header {
        model: model.config(),
        seed: model.seed(),
        tensors: tensors
            .iter()
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec_pretty(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        out.extend_from_slice(&encode_tensor(t)?);
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<AnyModel> {
    let bad = |m: String| Error::Checkpoint(m);
    if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("missing STCK magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(bad(format!("unsupported version {}", bytes[4])));
    }
    let hlen = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let body = &bytes[9..];
    if body.len() < hlen {
        return Err(bad("truncated header".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
    let mut model = AnyModel::build(&header.model, header.seed)?;
    let expected: Vec<Entry> = named_tensors(&model)
        .into_iter()
        .map(|(name, t)| Entry {
            name,
            shape: t.shape().to_vec(),
        })
        .collect();
    if expected != header.tensors {
        return Err(bad("tensor list does not match the model configuration".into()));
    }
    let mut cursor = &body[hlen..];
    let mut values = Vec::with_capacity(expected.len());
    for e in &expected {
        let t: Tensor<f32> =
            read_tensor(&mut cursor).map_err(|err| bad(format!("tensor {}: {err}", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(bad(format!("tensor {} has shape {:?}", e.name, t.shape())));
        }
        values.push(t);
    }
    if !cursor.is_empty() {
        return Err(bad(format!("{} trailing bytes", cursor.len())));
    }
    let n_params = model.params().len();
    let mut it = values.into_iter();
    for dst in model.params_mut().values_mut().iter_mut().take(n_params) {
        *dst = it.next().expect("counted");
    }
    for r in model.running_mut() {
        r.mean = it.next().expect("counted").into_data();
        r.var = it.next().expect("counted").into_data();
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &AnyModel) -> Result<()> {
    io::atomic_write(path, &write_checkpoint(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel> {
    read_checkpoint(&io::read_bytes(path)?)
}
