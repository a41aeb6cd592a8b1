//! Single-file model checkpoints.
//!
//! Layout: an 8-byte little-endian header length, the JSON header
//! (config, epoch, optimizer step, tensor manifest), then the concatenated
//! little-endian float32 payloads in manifest order — header first, no
//! trailer. Optimizer moments ride along as `opt.m.*` / `opt.v.*` tensors
//! so a resumed run replays the uninterrupted one. Roundtrips are
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_variant, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::AdamState;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    epoch: usize,
    adam_t: u64,
    has_opt: bool,
    tensors: Vec<TensorInfo>,
}

/// Loaded checkpoint contents.
pub struct Loaded {
    pub model: Model<f32>,
    pub opt: Option<AdamState<f32>>,
    pub epoch: usize,
}

fn push_tensor(payload: &mut Vec<u8>, manifest: &mut Vec<TensorInfo>, name: &str, t: &Tensor<f32>) {
    manifest.push(TensorInfo {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        dtype: "f32".to_string(),
    });
    for v in t.data() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model<f32>,
    opt: Option<&AdamState<f32>>,
    epoch: usize,
) -> Result<()> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.store.iter() {
        push_tensor(&mut payload, &mut manifest, name, t);
    }
    if let Some(state) = opt {
        for ((name, _), (m, v)) in model.store.iter().zip(state.m.iter().zip(state.v.iter())) {
            push_tensor(&mut payload, &mut manifest, &format!("opt.m.{name}"), m);
            push_tensor(&mut payload, &mut manifest, &format!("opt.v.{name}"), v);
        }
    }
    let header = Header {
        version: CHECKPOINT_VERSION,
        config: model.config.clone(),
        epoch,
        adam_t: opt.map_or(0, |s| s.t),
        has_opt: opt.is_some(),
        tensors: manifest,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    let mut bytes = Vec::with_capacity(8 + header_json.len() + payload.len());
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::format(
            path,
            "file too short for a header".to_string(),
        ));
    }
    let header_len = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::format(path, "truncated header".to_string()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| Error::format(path, e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {}", header.version),
        ));
    }
    let mut model = build_variant::<f32>(&header.config, 0)?;
    let mut opt = if header.has_opt {
        Some(AdamState::new(&model.store))
    } else {
        None
    };
    if let Some(state) = opt.as_mut() {
        state.t = header.adam_t;
    }
    let param_names: Vec<String> = model.store.names().map(|s| s.to_string()).collect();
    let mut offset = 8 + header_len;
    for info in &header.tensors {
        let n: usize = info.shape.iter().product();
        if info.dtype != "f32" {
            return Err(Error::format(
                path,
                format!("tensor {}: unsupported dtype {}", info.name, info.dtype),
            ));
        }
        if bytes.len() < offset + 4 * n {
            return Err(Error::format(
                path,
                format!("payload truncated at tensor {}", info.name),
            ));
        }
        let data: Vec<f32> = bytes[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += 4 * n;
        let tensor = Tensor::from_vec(&info.shape, data)?;
        if let Some(param) = info.name.strip_prefix("opt.m.") {
            let state = opt.as_mut().ok_or_else(|| {
                Error::format(
                    path,
                    "optimizer tensor in a checkpoint without has_opt".to_string(),
                )
            })?;
            let i = index_of(&param_names, param, path)?;
            check_shape(path, &info.name, &tensor, &state.m[i])?;
            state.m[i] = tensor;
        } else if let Some(param) = info.name.strip_prefix("opt.v.") {
            let state = opt.as_mut().ok_or_else(|| {
                Error::format(
                    path,
                    "optimizer tensor in a checkpoint without has_opt".to_string(),
                )
            })?;
            let i = index_of(&param_names, param, path)?;
            check_shape(path, &info.name, &tensor, &state.v[i])?;
            state.v[i] = tensor;
        } else {
            let existing = model.store.get(&info.name).map_err(|_| {
                Error::format(
                    path,
                    format!("manifest names unknown parameter {}", info.name),
                )
            })?;
            check_shape(path, &info.name, &tensor, existing)?;
            model.store.set(&info.name, tensor)?;
        }
    }
    if offset != bytes.len() {
        return Err(Error::format(
            path,
            format!("{} trailing bytes after payload", bytes.len() - offset),
        ));
    }
    Ok(Loaded {
        model,
        opt,
        epoch: header.epoch,
    })
}

fn index_of(names: &[String], param: &str, path: &Path) -> Result<usize> {
    names.iter().position(|n| n == param).ok_or_else(|| {
        Error::format(
            path,
            format!("optimizer tensor for unknown parameter {param}"),
        )
    })
}

fn check_shape(path: &Path, name: &str, got: &Tensor<f32>, want: &Tensor<f32>) -> Result<()> {
    if got.shape() != want.shape() {
        return Err(Error::format(
            path,
            format!(
                "tensor {name}: shape {:?} disagrees with configured {:?}",
                got.shape(),
                want.shape()
            ),
        ));
    }
    Ok(())
}
