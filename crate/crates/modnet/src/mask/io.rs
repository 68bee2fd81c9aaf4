//! Mask directory format: `manifest.json` (kind, shapes, seed, producing-run
//! id) plus one raw little-endian `.bin` per layer — 32-bit floats for
//! logits, single 0/1 bytes for binary masks.

use super::{BinaryMask, MaskLogits};
use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskFileKind {
    Logits,
    Binary,
}

#[derive(Serialize, Deserialize)]
struct MaskManifest {
    kind: MaskFileKind,
    seed: u64,
    run_id: String,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

/// Either flavor of mask loaded back from disk.
#[derive(Debug, Clone)]
pub enum MaskFile<T: Scalar> {
    Logits(MaskLogits<T>),
    Binary(BinaryMask),
}

fn bin_name(name: &str) -> String {
    format!("{}.bin", name.replace('.', "_"))
}

fn write_manifest(
    dir: &Path,
    kind: MaskFileKind,
    seed: u64,
    run_id: &str,
    layers: Vec<LayerEntry>,
) -> Result<()> {
    let manifest = MaskManifest { kind, seed, run_id: run_id.to_string(), layers };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn export_logits<T: Scalar>(
    logits: &MaskLogits<T>,
    seed: u64,
    run_id: &str,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    for (name, l) in logits.names.iter().zip(&logits.layers) {
        let file = bin_name(name);
        let mut bytes = Vec::with_capacity(l.len() * 4);
        for v in l.iter() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        fs::File::create(dir.join(&file))?.write_all(&bytes)?;
        layers.push(LayerEntry { name: name.clone(), shape: l.shape().to_vec(), file });
    }
    write_manifest(dir, MaskFileKind::Logits, seed, run_id, layers)
}

pub fn export_binary_mask(mask: &BinaryMask, seed: u64, run_id: &str, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    for (name, l) in mask.names.iter().zip(&mask.layers) {
        let file = bin_name(name);
        let bytes: Vec<u8> = l.iter().copied().collect();
        fs::File::create(dir.join(&file))?.write_all(&bytes)?;
        layers.push(LayerEntry { name: name.clone(), shape: l.shape().to_vec(), file });
    }
    write_manifest(dir, MaskFileKind::Binary, seed, run_id, layers)
}

pub fn import_mask<T: Scalar>(dir: &Path) -> Result<MaskFile<T>> {
    let manifest: MaskManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let entry_width = match manifest.kind {
        MaskFileKind::Logits => 4,
        MaskFileKind::Binary => 1,
    };
    let mut names = Vec::new();
    let mut float_layers = Vec::new();
    let mut bit_layers = Vec::new();
    for entry in &manifest.layers {
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path)?;
        let expected = entry.shape.iter().product::<usize>() * entry_width;
        if bytes.len() != expected {
            return Err(Error::Format {
                path: path.display().to_string(),
                offset: bytes.len() as u64,
                message: format!(
                    "mask layer {} expects {} bytes, file has {}",
                    entry.name,
                    expected,
                    bytes.len()
                ),
            });
        }
        names.push(entry.name.clone());
        match manifest.kind {
            MaskFileKind::Logits => {
                let values: Vec<T> = bytes
                    .chunks_exact(4)
                    .map(|ch| c::<T>(f32::from_le_bytes(ch.try_into().unwrap()) as f64))
                    .collect();
                float_layers.push(
                    ArrayD::from_shape_vec(entry.shape.as_slice(), values)
                        .map_err(|e| Error::shape(e.to_string()))?,
                );
            }
            MaskFileKind::Binary => {
                if let Some(pos) = bytes.iter().position(|&b| b > 1) {
                    return Err(Error::Format {
                        path: path.display().to_string(),
                        offset: pos as u64,
                        message: format!("binary mask layer {} has byte > 1", entry.name),
                    });
                }
                bit_layers.push(
                    ArrayD::from_shape_vec(entry.shape.as_slice(), bytes)
                        .map_err(|e| Error::shape(e.to_string()))?,
                );
            }
        }
    }
    Ok(match manifest.kind {
        MaskFileKind::Logits => MaskFile::Logits(MaskLogits { names, layers: float_layers }),
        MaskFileKind::Binary => MaskFile::Binary(BinaryMask { names, layers: bit_layers }),
    })
}

/// Per-layer CSV grids of sigmoid(π). Conv kernels of shape
/// (out, in, kh, kw) flatten to an (out × in·kh·kw) grid; matrices are
/// written as-is. Files are named `heatmap_<layer>.csv` under `dir`.
pub fn export_heatmap_csv<T: Scalar>(logits: &MaskLogits<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, l) in logits.names.iter().zip(&logits.layers) {
        let rows = l.shape()[0];
        let cols = l.len() / rows;
        let flat: Vec<f64> = l
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v.as_f64()).exp()))
            .collect();
        let mut out = String::new();
        for r in 0..rows {
            let row: Vec<String> =
                flat[r * cols..(r + 1) * cols].iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        fs::write(dir.join(format!("heatmap_{}.csv", name.replace('.', "_"))), out)?;
    }
    Ok(())
}
