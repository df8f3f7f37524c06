//! Binary model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ISPL" | u16 version | u32 header_len | header JSON | f32 params... | u32 crc32
//! ```
//!
//! The header holds the layer table and metadata. Parameters follow in layer
//! order, weight before bias. The CRC covers every byte before it.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LayerKind, LayerParams, Metadata, Model, ModelError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"ISPL";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated: needed {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checkpoint corrupted: crc {actual:08x}, stored {stored:08x}")]
    Crc { stored: u32, actual: u32 },
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint has {0} trailing bytes before the crc")]
    Trailing(usize),
    #[error("checkpoint describes an invalid model: {0}")]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    input_shape: Vec<usize>,
    class_count: usize,
    metadata: Metadata,
    layers: Vec<HeaderLayer>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLayer {
    name: String,
    #[serde(flatten)]
    kind: LayerKind,
    output_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    param_shapes: Vec<Vec<usize>>,
}

pub fn to_bytes(model: &Model<f32>) -> Vec<u8> {
    let header = Header {
        input_shape: model.input_shape().to_vec(),
        class_count: model.class_count(),
        metadata: model.metadata.clone(),
        layers: model
            .layers()
            .iter()
            .map(|l| HeaderLayer {
                name: l.name.clone(),
                kind: l.kind.clone(),
                output_shape: l.output_shape.clone(),
                param_shapes: model
                    .layer_params(l.index)
                    .map(|p| vec![p.weight.shape().to_vec(), p.bias.shape().to_vec()])
                    .unwrap_or_default(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(14 + json.len() + model.param_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params() {
        for &v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn need(bytes: &[u8], needed: usize) -> Result<(), CheckpointError> {
    if bytes.len() < needed {
        return Err(CheckpointError::Truncated {
            needed,
            have: bytes.len(),
        });
    }
    Ok(())
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model<f32>, CheckpointError> {
    need(bytes, 4)?;
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    need(bytes, 10)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    need(bytes, 10 + header_len + 4)?;
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(&bytes[..body_end]);
    if stored != actual {
        return Err(CheckpointError::Crc { stored, actual });
    }
    let header: Header = serde_json::from_slice(&bytes[10..10 + header_len])?;
    let mut cursor = 10 + header_len;
    let mut take = |shape: &[usize]| -> Result<Tensor<f32>, CheckpointError> {
        let n: usize = shape.iter().product();
        let end = cursor + n * 4;
        need(&bytes[..body_end], end)?;
        let data = bytes[cursor..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        cursor = end;
        Ok(Tensor::new(shape.to_vec(), data).map_err(ModelError::from)?)
    };
    let mut parts = Vec::with_capacity(header.layers.len());
    for layer in header.layers {
        let params = match layer.param_shapes.as_slice() {
            [] => None,
            [w, b] => Some(LayerParams {
                weight: take(w)?,
                bias: take(b)?,
            }),
            other => {
                return Err(CheckpointError::Model(ModelError::Params {
                    index: parts.len(),
                    name: layer.name,
                    detail: format!("expected weight and bias shapes, found {}", other.len()),
                }))
            }
        };
        parts.push((layer.name, layer.kind, params, layer.output_shape));
    }
    if cursor != body_end {
        return Err(CheckpointError::Trailing(body_end - cursor));
    }
    let declared: Vec<Vec<usize>> = parts.iter().map(|p| p.3.clone()).collect();
    let model = Model::from_parts(
        &header.input_shape,
        header.class_count,
        parts.into_iter().map(|(n, k, p, _)| (n, k, p)).collect(),
        header.metadata,
    )?;
    for (spec, shape) in model.layers().iter().zip(declared) {
        if spec.output_shape != shape {
            return Err(CheckpointError::Model(ModelError::ShapeChain {
                index: spec.index,
                name: spec.name.clone(),
                detail: format!("recorded output {shape:?} but layer produces {:?}", spec.output_shape),
            }));
        }
    }
    Ok(model)
}

/// Writes atomically through a sibling temporary file.
pub fn save(model: &Model<f32>, path: &Path) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("ispl.tmp");
    fs::write(&tmp, to_bytes(model))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Model<f32>, CheckpointError> {
    from_bytes(&fs::read(path)?)
}
