//! Under-complete convolutional autoencoder inserted at a split point, its
//! two training phases, and assembly into a deployable [`SplitPlan`].
//!
//! Encoder: two 3x3 stride-2 convolutions (ReLU after the first). Decoder:
//! two 3x3 stride-2 transposed convolutions (ReLU after the first) whose
//! output padding restores the exact input extent.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::model::{split, LayerKind, Metadata, Model, ModelError, SplitPlan};
use crate::tensor::{Scalar, Tensor};
use crate::train::{self, fit, History, Phase, Reconstruction, TrainConfig, TrainError};

/// Slack for float noise in `(1 - rate) * elements` when flooring or ceiling.
const BUDGET_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum BottleneckError {
    #[error("bottleneck input {shape:?} too small: need spatial extent of at least 4x4")]
    TooSmall { shape: Vec<usize> },
    #[error("layer {layer} output {shape:?} is not a (C,H,W) feature map")]
    NotSpatial { layer: usize, shape: Vec<usize> },
    #[error("compression rate {0} outside (0, 1)")]
    Rate(f64),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("split artifact {path}: {detail}")]
    Artifact { path: String, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub target_layer: usize,
    /// `(z, n, m)` of the target layer output.
    pub input_shape: [usize; 3],
    pub compression_rate: f64,
    pub hidden_channels: usize,
    pub latent_channels: usize,
    /// `(latent_channels, ceil(n/4), ceil(m/4))`
    pub latent_shape: [usize; 3],
    /// Output padding of the two decoder layers, each `[rows, cols]`.
    pub decoder_output_padding: [[usize; 2]; 2],
    /// `ceil((1 - rate) * z * n * m)`
    pub budget: usize,
    /// Set when the budget is below one channel and the channel count was
    /// clamped to 1; the latent may then exceed the budget.
    pub clamp_warning: bool,
}

impl BottleneckSpec {
    pub fn input_elements(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn encoded_elements(&self) -> usize {
        self.latent_shape.iter().product()
    }

    /// Payload per image as f32.
    pub fn encoded_bytes(&self) -> usize {
        self.encoded_elements() * 4
    }

    fn encoder_layers(&self) -> Vec<(String, LayerKind)> {
        let conv = |out_channels, fused_relu| LayerKind::Conv {
            out_channels,
            kernel: 3,
            stride: 2,
            padding: 1,
            fused_relu,
        };
        vec![
            ("bottleneck_enc1".into(), conv(self.hidden_channels, true)),
            ("bottleneck_enc2".into(), conv(self.latent_channels, false)),
        ]
    }

    fn decoder_layers(&self) -> Vec<(String, LayerKind)> {
        let deconv = |out_channels, output_padding, fused_relu| LayerKind::ConvTranspose {
            out_channels,
            kernel: 3,
            stride: 2,
            padding: 1,
            output_padding,
            fused_relu,
        };
        let [op1, op2] = self.decoder_output_padding;
        vec![
            ("bottleneck_dec1".into(), deconv(self.hidden_channels, op1, true)),
            ("bottleneck_dec2".into(), deconv(self.input_shape[0], op2, false)),
        ]
    }
}

/// Sizes the autoencoder for a `(z, n, m)` feature map at compression `rate`.
pub fn build_bottleneck(target_layer: usize, input_shape: [usize; 3], rate: f64) -> Result<BottleneckSpec, BottleneckError> {
    let [z, n, m] = input_shape;
    if n < 4 || m < 4 || z == 0 {
        return Err(BottleneckError::TooSmall {
            shape: input_shape.to_vec(),
        });
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(BottleneckError::Rate(rate));
    }
    let half = |v: usize| v.div_ceil(2);
    let (n1, m1) = (half(n), half(m));
    let (n2, m2) = (half(n1), half(m1));
    let keep = (1.0 - rate) * (z * n * m) as f64;
    let per_position = keep / (n2 * m2) as f64;
    let raw = (per_position + BUDGET_EPS).floor() as usize;
    let latent_channels = raw.max(1);
    let budget = (keep - BUDGET_EPS).ceil() as usize;
    let encoded = latent_channels * n2 * m2;
    // transposed conv k3 s2 p1: out = 2 * in - 1 + output_padding
    let op1 = [n1 + 1 - 2 * n2, m1 + 1 - 2 * m2];
    let op2 = [n + 1 - 2 * n1, m + 1 - 2 * m1];
    let spec = BottleneckSpec {
        target_layer,
        input_shape,
        compression_rate: rate,
        hidden_channels: (z + latent_channels).div_ceil(2),
        latent_channels,
        latent_shape: [latent_channels, n2, m2],
        decoder_output_padding: [op1, op2],
        budget,
        clamp_warning: raw == 0,
    };
    if spec.clamp_warning {
        log::warn!(
            "bottleneck at layer {target_layer}: budget {budget} elements is below one channel of {}x{}; latent holds {encoded}",
            n2,
            m2
        );
    }
    Ok(spec)
}

/// `build_bottleneck` for the output of `model`'s layer `target_layer`.
pub fn spec_for_layer<T: Scalar>(model: &Model<T>, target_layer: usize, rate: f64) -> Result<BottleneckSpec, BottleneckError> {
    let spec = model.layer(target_layer)?;
    let &[z, n, m] = spec.output_shape.as_slice() else {
        return Err(BottleneckError::NotSpatial {
            layer: target_layer,
            shape: spec.output_shape.clone(),
        });
    };
    build_bottleneck(target_layer, [z, n, m], rate)
}

/// Layers eligible for a bottleneck: spatial outputs of at least 4x4, except
/// the final layer.
pub fn eligible_layers<T: Scalar>(model: &Model<T>) -> Vec<usize> {
    model
        .layers()
        .iter()
        .filter(|l| l.index + 1 < model.len())
        .filter(|l| matches!(*l.output_shape.as_slice(), [_, n, m] if n >= 4 && m >= 4))
        .map(|l| l.index)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AePhase {
    Initialized,
    AeTrained,
    Finetuned,
}

/// Encoder and decoder weights for one [`BottleneckSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub spec: BottleneckSpec,
    pub encoder: Model<f32>,
    pub decoder: Model<f32>,
    pub phase: AePhase,
}

impl Autoencoder {
    pub fn new(spec: BottleneckSpec, seed: u64) -> Result<Self, BottleneckError> {
        let both = spec.encoder_layers().into_iter().chain(spec.decoder_layers()).collect();
        let full = Model::initialized(&spec.input_shape, 0, both, seed)?;
        let encoder = full.slice(0..2)?;
        let decoder = full.slice(2..4)?;
        debug_assert_eq!(decoder.output_shape(), spec.input_shape);
        Ok(Self {
            spec,
            encoder,
            decoder,
            phase: AePhase::Initialized,
        })
    }

    fn joined(&self) -> Result<Model<f32>, ModelError> {
        self.encoder.concat(&self.decoder)
    }

    fn set_from_joined(&mut self, joined: &Model<f32>) -> Result<(), ModelError> {
        self.encoder = joined.slice(0..2)?;
        self.decoder = joined.slice(2..4)?;
        Ok(())
    }

    pub fn reconstruct(&self, x: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        self.decoder.forward(&self.encoder.forward(x)?)
    }
}

/// What sits between head and tail.
#[derive(Debug, Clone, PartialEq)]
pub enum Bottleneck {
    /// No compression; debugging and transport checks.
    Identity { target_layer: usize },
    Autoencoder(Autoencoder),
}

fn check_spec(model: &Model<f32>, spec: &BottleneckSpec) -> Result<(), TrainError> {
    let actual = model.layer(spec.target_layer).map(|l| l.output_shape.clone())?;
    if actual != spec.input_shape {
        return Err(TrainError::SpecMismatch {
            spec_layer: spec.target_layer,
            spec_shape: spec.input_shape.to_vec(),
            actual,
        });
    }
    Ok(())
}

/// Target-layer activations for every image, computed once with the frozen model.
pub fn layer_features(model: &Model<f32>, layer: usize, images: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>, ModelError> {
    use rayon::prelude::*;
    images.par_iter().map(|x| model.forward_range(x, 0..layer + 1)).collect()
}

/// Reconstruction-loss training of the autoencoder alone. `model` is only
/// read, so its parameters cannot change.
pub fn train_ae(
    model: &Model<f32>,
    ae: &mut Autoencoder,
    images: &[Tensor<f32>],
    cfg: &TrainConfig,
) -> Result<History, BottleneckError> {
    check_spec(model, &ae.spec)?;
    if cfg.phase != Phase::Ae {
        return Err(TrainError::Config(format!("train_ae needs an ae-phase config, got {}", cfg.phase)).into());
    }
    let features = layer_features(model, ae.spec.target_layer, images)?;
    let history = train_ae_on_features(ae, &features, cfg)?;
    Ok(history)
}

pub fn train_ae_on_features(ae: &mut Autoencoder, features: &[Tensor<f32>], cfg: &TrainConfig) -> Result<History, BottleneckError> {
    let mut joined = ae.joined()?;
    let history = fit(&mut joined, features, &Reconstruction { targets: features }, cfg)?;
    ae.set_from_joined(&joined)?;
    if cfg.epochs > 0 {
        ae.phase = AePhase::AeTrained;
    }
    Ok(history)
}

/// Full network with the autoencoder spliced in after the target layer.
pub fn spliced(model: &Model<f32>, ae: &Autoencoder) -> Result<Model<f32>, ModelError> {
    let t = ae.spec.target_layer;
    let mut m = model
        .slice(0..t + 1)?
        .concat(&ae.encoder)?
        .concat(&ae.decoder)?
        .concat(&model.slice(t + 1..model.len())?)?;
    m.metadata = model.metadata.clone();
    Ok(m)
}

/// End-to-end training of base and bottleneck weights together. Refuses to
/// run on an untrained autoencoder unless `allow_untrained` is set.
pub fn finetune(
    model: &mut Model<f32>,
    ae: &mut Autoencoder,
    images: &[Tensor<f32>],
    labels: &[usize],
    cfg: &TrainConfig,
    allow_untrained: bool,
) -> Result<History, BottleneckError> {
    check_spec(model, &ae.spec)?;
    if ae.phase == AePhase::Initialized && !allow_untrained {
        return Err(TrainError::PhaseOrder.into());
    }
    if cfg.phase != Phase::Finetune {
        return Err(TrainError::Config(format!("finetune needs a finetune-phase config, got {}", cfg.phase)).into());
    }
    let t = ae.spec.target_layer;
    let mut full = spliced(model, ae)?;
    let history = train::train_classifier(&mut full, images, labels, cfg)?;
    let mut base = full.slice(0..t + 1)?.concat(&full.slice(t + 5..full.len())?)?;
    base.metadata = model.metadata.clone();
    *model = base;
    ae.encoder = full.slice(t + 1..t + 3)?;
    ae.decoder = full.slice(t + 3..t + 5)?;
    if cfg.epochs > 0 {
        ae.phase = AePhase::Finetuned;
    }
    Ok(history)
}

/// Head = layers `0..=T` plus encoder, tail = decoder plus the remaining layers.
pub fn assemble(model: &Model<f32>, bottleneck: &Bottleneck) -> Result<SplitPlan<f32>, BottleneckError> {
    match bottleneck {
        Bottleneck::Identity { target_layer } => Ok(split(model, *target_layer)?),
        Bottleneck::Autoencoder(ae) => {
            check_spec(model, &ae.spec)?;
            let plain = split(model, ae.spec.target_layer)?;
            let mut head = plain.head.concat(&ae.encoder)?;
            let mut tail = ae.decoder.concat(&plain.tail)?;
            head.metadata = Metadata {
                role: "head".into(),
                ..model.metadata.clone()
            };
            tail.metadata = Metadata {
                role: "tail".into(),
                ..model.metadata.clone()
            };
            Ok(SplitPlan {
                target_layer: ae.spec.target_layer,
                head,
                tail,
                bottleneck: Some(ae.spec.clone()),
            })
        }
    }
}

/// Inverse of [`assemble`]: recovers the base model and the bottleneck.
pub fn disassemble(plan: &SplitPlan<f32>, phase: AePhase) -> Result<(Model<f32>, Bottleneck), BottleneckError> {
    let t = plan.target_layer;
    let Some(spec) = plan.bottleneck.clone() else {
        let mut base = plan.head.concat(&plan.tail)?;
        base.metadata.role = "base".into();
        return Ok((base, Bottleneck::Identity { target_layer: t }));
    };
    let (h, tl) = (plan.head.len(), plan.tail.len());
    if h != t + 3 || tl < 3 {
        return Err(BottleneckError::Artifact {
            path: String::new(),
            detail: format!("split at layer {t} has a {h}-layer head and a {tl}-layer tail"),
        });
    }
    let mut base = plan.head.slice(0..t + 1)?.concat(&plan.tail.slice(2..tl)?)?;
    base.metadata = Metadata {
        role: "base".into(),
        ..plan.head.metadata.clone()
    };
    let ae = Autoencoder {
        encoder: plan.head.slice(t + 1..t + 3)?,
        decoder: plan.tail.slice(0..2)?,
        spec,
        phase,
    };
    check_spec(&base, &ae.spec)?;
    Ok((base, Bottleneck::Autoencoder(ae)))
}

/// JSON sidecar stored next to `head.ispl` and `tail.ispl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSidecar {
    pub split_layer: usize,
    pub split_layer_name: String,
    pub compression_rate: Option<f64>,
    pub latent_shape: Vec<usize>,
    pub encoded_elements: usize,
    pub raw_layer_elements: usize,
    pub clamp_warning: bool,
    pub bottleneck: Option<BottleneckSpec>,
    /// Training phase of the bottleneck; `None` for an identity split.
    pub phase: Option<AePhase>,
    pub ae_history: History,
    pub finetune_history: History,
    #[serde(default)]
    pub accuracy: Option<f64>,
}

impl SplitSidecar {
    pub fn describe(model: &Model<f32>, plan: &SplitPlan<f32>) -> Result<Self, ModelError> {
        let layer = model.layer(plan.target_layer)?;
        let latent_shape = plan.head.output_shape().to_vec();
        Ok(Self {
            split_layer: plan.target_layer,
            split_layer_name: layer.name.clone(),
            compression_rate: plan.bottleneck.as_ref().map(|b| b.compression_rate),
            encoded_elements: latent_shape.iter().product(),
            latent_shape,
            raw_layer_elements: layer.output_size(),
            clamp_warning: plan.bottleneck.as_ref().is_some_and(|b| b.clamp_warning),
            bottleneck: plan.bottleneck.clone(),
            phase: plan.bottleneck.as_ref().map(|_| AePhase::Initialized),
            ae_history: Vec::new(),
            finetune_history: Vec::new(),
            accuracy: None,
        })
    }
}

pub fn save_split(dir: &Path, plan: &SplitPlan<f32>, sidecar: &SplitSidecar) -> Result<(), BottleneckError> {
    fs::create_dir_all(dir).map_err(CheckpointError::from)?;
    checkpoint::save(&plan.head, &dir.join("head.ispl"))?;
    checkpoint::save(&plan.tail, &dir.join("tail.ispl"))?;
    let json = serde_json::to_string_pretty(sidecar).expect("sidecar serializes");
    fs::write(dir.join("split.json"), json + "\n").map_err(CheckpointError::from)?;
    Ok(())
}

pub fn load_split(dir: &Path) -> Result<(SplitPlan<f32>, SplitSidecar), BottleneckError> {
    let head = checkpoint::load(&dir.join("head.ispl"))?;
    let tail = checkpoint::load(&dir.join("tail.ispl"))?;
    let path = dir.join("split.json");
    let text = fs::read_to_string(&path).map_err(CheckpointError::from)?;
    let sidecar: SplitSidecar = serde_json::from_str(&text).map_err(|e| BottleneckError::Artifact {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if head.output_shape() != tail.input_shape() {
        return Err(BottleneckError::Artifact {
            path: dir.display().to_string(),
            detail: format!("head emits {:?} but tail expects {:?}", head.output_shape(), tail.input_shape()),
        });
    }
    let plan = SplitPlan {
        target_layer: sidecar.split_layer,
        head,
        tail,
        bottleneck: sidecar.bottleneck.clone(),
    };
    Ok((plan, sidecar))
}
