//! IDX-format ingestion (the classic big-endian digit-dataset layout).

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use ndarray::Array3;
use std::fs;
use std::path::Path;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: bytes.len() as u64,
            message: format!("truncated header: need {} bytes, file has {}", end, bytes.len()),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Load a grayscale IDX image file plus its label file. Pixels are scaled
/// by 1/255 into [0,1].
pub fn load_mnist_idx<T: Scalar>(
    image_path: &Path,
    label_path: &Path,
) -> Result<(Array3<T>, Vec<u8>)> {
    let img_bytes = fs::read(image_path)?;
    let magic = be_u32(&img_bytes, 0, image_path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format {
            path: image_path.display().to_string(),
            offset: 0,
            message: format!("expected image magic {IMAGE_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let n = be_u32(&img_bytes, 4, image_path)? as usize;
    let rows = be_u32(&img_bytes, 8, image_path)? as usize;
    let cols = be_u32(&img_bytes, 12, image_path)? as usize;
    let expected = 16 + n * rows * cols;
    if img_bytes.len() != expected {
        return Err(Error::Format {
            path: image_path.display().to_string(),
            offset: img_bytes.len().min(expected) as u64,
            message: format!("expected {} bytes of pixel data, file has {}", expected, img_bytes.len()),
        });
    }

    let lbl_bytes = fs::read(label_path)?;
    let magic = be_u32(&lbl_bytes, 0, label_path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format {
            path: label_path.display().to_string(),
            offset: 0,
            message: format!("expected label magic {LABEL_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let n_labels = be_u32(&lbl_bytes, 4, label_path)? as usize;
    if lbl_bytes.len() != 8 + n_labels {
        return Err(Error::Format {
            path: label_path.display().to_string(),
            offset: lbl_bytes.len().min(8 + n_labels) as u64,
            message: format!(
                "expected {} label bytes, file has {}",
                8 + n_labels,
                lbl_bytes.len()
            ),
        });
    }
    if n_labels != n {
        return Err(Error::Format {
            path: label_path.display().to_string(),
            offset: 4,
            message: format!("{n} images but {n_labels} labels"),
        });
    }

    let scale = c::<T>(1.0 / 255.0);
    let pixels: Vec<T> = img_bytes[16..].iter().map(|&b| c::<T>(b as f64) * scale).collect();
    let images = Array3::from_shape_vec((n, rows, cols), pixels)
        .map_err(|e| Error::shape(e.to_string()))?;
    Ok((images, lbl_bytes[8..].to_vec()))
}
