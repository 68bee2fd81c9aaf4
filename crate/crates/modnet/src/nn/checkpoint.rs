//! Checkpoint directory format: `manifest.json` (layer names, shapes, dtype,
//! step_count, seed) plus one raw little-endian 32-bit-float row-major
//! `.bin` file per layer.

use super::{ParamKind, ParamTensor, ParameterSet};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    dtype: String,
    step_count: usize,
    seed: u64,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    file: String,
}

fn bin_name(name: &str) -> String {
    format!("{}.bin", name.replace('.', "_"))
}

pub fn save_checkpoint<T: Scalar>(params: &ParameterSet<T>, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    for p in params.params() {
        let file = bin_name(&p.name);
        let mut bytes = Vec::with_capacity(p.values.len() * 4);
        for v in p.values.iter() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        fs::File::create(dir.join(&file))?.write_all(&bytes)?;
        layers.push(LayerEntry {
            name: p.name.clone(),
            kind: p.kind,
            shape: p.values.shape().to_vec(),
            file,
        });
    }
    let manifest = CheckpointManifest {
        dtype: "f32".into(),
        step_count: params.step_count,
        seed,
        layers,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint directory. Returns the parameter set and the seed
/// recorded in the manifest.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(ParameterSet<T>, u64)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let mut params = Vec::new();
    for entry in &manifest.layers {
        let path = dir.join(&entry.file);
        let mut bytes = Vec::new();
        fs::File::open(&path)?.read_to_end(&mut bytes)?;
        let expected = entry.shape.iter().product::<usize>() * 4;
        if bytes.len() != expected {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: bytes.len() as u64,
                message: format!(
                    "layer {} expects {} bytes, file has {}",
                    entry.name,
                    expected,
                    bytes.len()
                ),
            });
        }
        let values: Vec<T> = bytes
            .chunks_exact(4)
            .map(|ch| c::<T>(f32::from_le_bytes(ch.try_into().unwrap()) as f64))
            .collect();
        let arr = ArrayD::from_shape_vec(entry.shape.as_slice(), values)
            .map_err(|e| Error::shape(e.to_string()))?;
        params.push(ParamTensor { name: entry.name.clone(), kind: entry.kind, values: arr });
    }
    let mut set = ParameterSet::new(params)?;
    set.step_count = manifest.step_count;
    Ok((set, manifest.seed))
}
