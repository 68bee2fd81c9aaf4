//! Dataset directory format: `meta.json` (seed, bias spec, per-environment
//! entries) plus per-environment little-endian f32 image arrays and raw u8
//! label arrays.

use super::{BiasSpec, EnvironmentDataset};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    seed: u64,
    spec: BiasSpec,
    envs: Vec<EnvEntry>,
}

#[derive(Serialize, Deserialize)]
struct EnvEntry {
    env_id: usize,
    seen: bool,
    bias_coefficient: f64,
    items: usize,
    channels: usize,
    height: usize,
    width: usize,
    images_file: String,
    class_labels_file: String,
    color_labels_file: String,
}

pub fn save_dataset_dir<T: Scalar>(
    envs: &[EnvironmentDataset<T>],
    spec: &BiasSpec,
    seed: u64,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for env in envs {
        let (n, ch, h, w) = env.images.dim();
        let images_file = format!("env{}_images.bin", env.env_id);
        let class_labels_file = format!("env{}_class_labels.bin", env.env_id);
        let color_labels_file = format!("env{}_color_labels.bin", env.env_id);
        let mut bytes = Vec::with_capacity(env.images.len() * 4);
        for v in env.images.iter() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        fs::File::create(dir.join(&images_file))?.write_all(&bytes)?;
        fs::write(dir.join(&class_labels_file), &env.class_labels)?;
        fs::write(dir.join(&color_labels_file), &env.color_labels)?;
        entries.push(EnvEntry {
            env_id: env.env_id,
            seen: env.seen,
            bias_coefficient: env.bias_coefficient,
            items: n,
            channels: ch,
            height: h,
            width: w,
            images_file,
            class_labels_file,
            color_labels_file,
        });
    }
    let meta = DatasetMeta { seed, spec: spec.clone(), envs: entries };
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}

pub fn load_dataset_dir<T: Scalar>(
    dir: &Path,
) -> Result<(Vec<EnvironmentDataset<T>>, BiasSpec, u64)> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let mut envs = Vec::with_capacity(meta.envs.len());
    for entry in &meta.envs {
        let path = dir.join(&entry.images_file);
        let bytes = fs::read(&path)?;
        let count = entry.items * entry.channels * entry.height * entry.width;
        if bytes.len() != count * 4 {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: bytes.len() as u64,
                message: format!("expected {} image bytes, file has {}", count * 4, bytes.len()),
            });
        }
        let values: Vec<T> = bytes
            .chunks_exact(4)
            .map(|ch| c::<T>(f32::from_le_bytes(ch.try_into().unwrap()) as f64))
            .collect();
        let images =
            Array4::from_shape_vec((entry.items, entry.channels, entry.height, entry.width), values)
                .map_err(|e| Error::shape(e.to_string()))?;
        let read_labels = |file: &str| -> Result<Vec<u8>> {
            let path = dir.join(file);
            let bytes = fs::read(&path)?;
            if bytes.len() != entry.items {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    offset: bytes.len() as u64,
                    message: format!("expected {} label bytes, file has {}", entry.items, bytes.len()),
                });
            }
            Ok(bytes)
        };
        envs.push(EnvironmentDataset {
            env_id: entry.env_id,
            seen: entry.seen,
            images,
            class_labels: read_labels(&entry.class_labels_file)?,
            color_labels: read_labels(&entry.color_labels_file)?,
            bias_coefficient: entry.bias_coefficient,
        });
    }
    Ok((envs, meta.spec, meta.seed))
}
