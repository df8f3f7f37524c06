//! IDX container reading and writing (unsigned-byte payloads only).

use std::fs;
use std::path::Path;

use super::{DataError, Dataset};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Returns the dimension list and the payload.
fn parse<'a>(bytes: &'a [u8], path: &Path, magic: u32) -> Result<(Vec<usize>, &'a [u8]), DataError> {
    let name = || path.display().to_string();
    let truncated = |expected: usize| DataError::Truncated {
        path: name(),
        expected,
        actual: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(4));
    }
    let actual = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if actual != magic {
        return Err(DataError::Magic {
            path: name(),
            expected: magic,
            actual,
        });
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(truncated(header));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    Ok((dims, &bytes[header..expected]))
}

fn to_images(dims: &[usize], pixels: &[u8]) -> Result<Vec<Tensor<f32>>, DataError> {
    let (rows, cols) = (dims[1], dims[2]);
    if rows == 0 || cols == 0 {
        return Err(DataError::Invalid(format!("image extent {rows}x{cols}")));
    }
    Ok(pixels
        .chunks_exact(rows * cols)
        .map(|c| Tensor::new(vec![1, rows, cols], c.iter().map(|&p| p as f32 / 255.0).collect()).expect("sized chunk"))
        .collect())
}

/// Loads an image file without labels, scaled and shaped as in [`load_idx`].
pub fn load_idx_images(path: &Path) -> Result<Vec<Tensor<f32>>, DataError> {
    let bytes = read(path)?;
    let (dims, pixels) = parse(&bytes, path, IMAGES_MAGIC)?;
    to_images(&dims, pixels)
}

/// Loads an image/label file pair. Pixels are scaled to `[0, 1]`, images are
/// shaped `(1, rows, cols)` and the class count is `max(label) + 1`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let image_bytes = read(images_path)?;
    let label_bytes = read(labels_path)?;
    let (idims, pixels) = parse(&image_bytes, images_path, IMAGES_MAGIC)?;
    let (ldims, labels) = parse(&label_bytes, labels_path, LABELS_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(DataError::CountMismatch {
            images: idims[0],
            labels: ldims[0],
        });
    }
    let images = to_images(&idims, pixels)?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let id = images_path
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(id, images, labels, classes)
}

/// Writes single-channel images (quantized to bytes) and labels as an IDX pair.
pub fn write_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<(), DataError> {
    let shape = dataset.image_shape();
    let &[1, rows, cols] = shape else {
        return Err(DataError::Invalid(format!("IDX export needs (1,H,W) images, got {shape:?}")));
    };
    if let Some(&label) = dataset.labels.iter().find(|&&l| l > 255) {
        return Err(DataError::Invalid(format!("label {label} does not fit in a byte")));
    }
    let n = dataset.len() as u32;
    let mut img = Vec::with_capacity(16 + dataset.len() * rows * cols);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows as u32, cols as u32] {
        img.extend_from_slice(&d.to_be_bytes());
    }
    for image in &dataset.images {
        img.extend(image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend(dataset.labels.iter().map(|&l| l as u8));
    for (path, bytes) in [(images_path, img), (labels_path, lab)] {
        fs::write(path, bytes).map_err(|source| DataError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}
