//! Single-file binary checkpoints.
//!
//! Layout: the 8-byte magic `SZNETCK1`, a little-endian `u32` format version,
//! a little-endian `u64` manifest length, the manifest as canonical JSON
//! (sorted keys, no whitespace), then the payload of little-endian `f32`
//! tensors in manifest order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::models::{build_model_for_length, Arch, ModelGraph};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SZNETCK1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;

pub const STANDARDIZE_MEAN: &str = "standardize.mean";
pub const STANDARDIZE_STD: &str = "standardize.std";

/// Training metadata stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Arch,
    pub task: u8,
    pub num_classes: usize,
    pub input_len: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_accuracy: f64,
    /// Resolved training configuration, kept verbatim.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub meta: CheckpointMeta,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub model: ModelGraph<f32>,
    pub standardizer: Standardizer,
    pub meta: CheckpointMeta,
}

fn nbytes(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64 * 4
}

pub fn encode(model: &ModelGraph<f32>, standardizer: &Standardizer, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    if model.arch() != Some(meta.arch) || model.num_classes() != meta.num_classes {
        return Err(Error::Checkpoint(format!(
            "metadata declares {} with {} classes but the model is {:?} with {}",
            meta.arch,
            meta.num_classes,
            model.arch(),
            model.num_classes()
        )));
    }
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    let mut push = |name: &str, shape: &[usize], data: &[f32]| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    model.visit_state(&mut |name, t| push(name, t.shape(), t.data()));
    let len = standardizer.len();
    push(STANDARDIZE_MEAN, &[len], &standardizer.mean);
    push(STANDARDIZE_STD, &[len], &standardizer.std);

    let manifest = Manifest {
        meta: meta.clone(),
        tensors,
    };
    // Value objects are BTreeMaps, so keys come out sorted.
    let json = serde_json::to_string(&serde_json::to_value(&manifest)?)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(json.as_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save_checkpoint(
    model: &ModelGraph<f32>,
    standardizer: &Standardizer,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, encode(model, standardizer, meta)?)?;
    Ok(())
}

fn region<'a>(bytes: &'a [u8], start: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let end = start
        .checked_add(len)
        .ok_or_else(|| Error::Checkpoint(format!("{what}: length overflow")))?;
    bytes.get(start..end).ok_or_else(|| {
        Error::Checkpoint(format!(
            "truncated file: {what} needs bytes {start}..{end}, file has {}",
            bytes.len()
        ))
    })
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let magic = region(bytes, 0, 8, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(region(bytes, 8, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let mlen = u64::from_le_bytes(region(bytes, 12, 8, "manifest length")?.try_into().expect("8 bytes"));
    let mlen = usize::try_from(mlen).map_err(|_| Error::Checkpoint(format!("manifest length {mlen} too large")))?;
    let manifest: Manifest = serde_json::from_slice(region(bytes, HEADER_LEN, mlen, "manifest")?)?;
    Ok((manifest, &bytes[HEADER_LEN + mlen..]))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, payload) = read_manifest(bytes)?;
    let meta = manifest.meta;
    // the seed only shapes the initial weights, all of which are overwritten
    let mut model = build_model_for_length::<f32>(meta.arch, meta.num_classes, meta.seed, meta.input_len)?;

    let mut expected = Vec::new();
    model.visit_state(&mut |name, t| expected.push((name.to_string(), t.shape().to_vec())));
    expected.push((STANDARDIZE_MEAN.into(), vec![meta.input_len]));
    expected.push((STANDARDIZE_STD.into(), vec![meta.input_len]));
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, {} expects {}",
            manifest.tensors.len(),
            meta.arch,
            expected.len()
        )));
    }

    let mut offset = 0u64;
    let mut values: Vec<Vec<f32>> = Vec::with_capacity(expected.len());
    for (entry, (name, shape)) in manifest.tensors.iter().zip(&expected) {
        if &entry.name != name || &entry.shape != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {}: manifest declares {:?} but {} expects {name} {shape:?}",
                entry.name, entry.shape, meta.arch
            )));
        }
        if entry.offset != offset {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: offset {} but previous tensors end at {offset}",
                entry.offset
            )));
        }
        let size = nbytes(shape);
        let raw = region(
            payload,
            offset as usize,
            size as usize,
            &format!("payload of tensor {name}"),
        )?;
        values.push(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect(),
        );
        offset += size;
    }
    if payload.len() as u64 != offset {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes but the manifest accounts for {offset}",
            payload.len()
        )));
    }

    let std = values.pop().expect("std entry");
    let mean = values.pop().expect("mean entry");
    let mut it = values.into_iter();
    model.visit_state_mut(&mut |_, t: &mut Tensor<f32>| {
        t.data_mut().copy_from_slice(&it.next().expect("one entry per tensor"));
    });
    Ok(Checkpoint {
        model,
        standardizer: Standardizer { mean, std },
        meta,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
