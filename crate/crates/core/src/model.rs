//! Sequential CNN definitions: layer tables, parameter storage, forward
//! execution with and without a tape, and slicing into head/tail sub-models.
//!
//! Layers are indexed from 0 over *every* layer in forward order, including
//! ReLU and flatten layers. Keras-style VGG numbering (1-based, counting only
//! conv and pool layers, activations fused into convs) therefore does not
//! line up with these indices: `block2_pool` of a VGG is layer 5 there, while
//! in `vgg-micro` it is index 5 only by coincidence of layout (conv, relu,
//! pool per block). Use [`Model::layer_by_name`] when in doubt.

use std::fmt;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, Tape, Var};
use crate::bottleneck::BottleneckSpec;
use crate::error::{AutodiffError, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("architecture has no layers")]
    EmptyArchitecture,
    #[error("architecture line {line}: {detail}")]
    Parse { line: usize, detail: String },
    #[error("unknown architecture preset {0:?} (expected vgg-micro, vgg-nano or mlp-baseline)")]
    UnknownPreset(String),
    #[error("shape chain breaks at layer {index} ({name}): {detail}")]
    ShapeChain { index: usize, name: String, detail: String },
    #[error("model output shape {actual:?} does not match {classes} classes")]
    OutputShape { actual: Vec<usize>, classes: usize },
    #[error("split index {index} out of range; valid split points are 0..{last}")]
    SplitIndex { index: usize, last: usize },
    #[error("layer index {index} out of range for {count} layers")]
    LayerIndex { index: usize, count: usize },
    #[error("parameter for layer {index} ({name}): {detail}")]
    Params { index: usize, name: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Layer operation plus its hyperparameters. Input extents are inferred.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        /// ReLU applied to the conv output inside the same layer.
        #[serde(default)]
        fused_relu: bool,
    },
    ConvTranspose {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        /// `[rows, cols]`
        output_padding: [usize; 2],
        #[serde(default)]
        fused_relu: bool,
    },
    Relu,
    #[serde(rename = "maxpool")]
    MaxPool { kernel: usize, stride: usize },
    Flatten,
    Dense { out_features: usize },
    Softmax,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::ConvTranspose { .. } => "conv_transpose",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Dense { .. } => "dense",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::ConvTranspose { .. } | LayerKind::Dense { .. })
    }

    /// Output shape for a given input shape, plus the (weight, bias) shapes
    /// when the layer is parameterized.
    fn infer(&self, input: &[usize]) -> Result<(Vec<usize>, Option<(Vec<usize>, Vec<usize>)>), String> {
        let spatial = |what: &str| match *input {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(format!("{what} needs a (C,H,W) input, got {input:?}")),
        };
        match *self {
            LayerKind::Conv { out_channels, kernel, stride, padding, .. } => {
                let (c, _, _) = spatial("conv")?;
                let wshape = [out_channels, c, kernel, kernel];
                let out = kernels::conv2d_output_shape(input, &wshape, ConvGeometry { stride, padding })
                    .map_err(|e| e.to_string())?;
                Ok((out.to_vec(), Some((wshape.to_vec(), vec![out_channels]))))
            }
            LayerKind::ConvTranspose { out_channels, kernel, stride, padding, output_padding, .. } => {
                let (c, _, _) = spatial("conv_transpose")?;
                let wshape = [c, out_channels, kernel, kernel];
                let out = kernels::conv_transpose2d_output_shape(
                    input,
                    &wshape,
                    ConvGeometry { stride, padding },
                    output_padding,
                )
                .map_err(|e| e.to_string())?;
                Ok((out.to_vec(), Some((wshape.to_vec(), vec![out_channels]))))
            }
            LayerKind::Relu | LayerKind::Softmax => Ok((input.to_vec(), None)),
            LayerKind::MaxPool { kernel, stride } => {
                let out = kernels::maxpool2d_output_shape(input, kernel, stride).map_err(|e| e.to_string())?;
                Ok((out.to_vec(), None))
            }
            LayerKind::Flatten => Ok((vec![input.iter().product()], None)),
            LayerKind::Dense { out_features } => {
                let &[n] = input else {
                    return Err(format!("dense needs a flat input, got {input:?}; insert a flatten layer"));
                };
                Ok((vec![out_features], Some((vec![out_features, n], vec![out_features]))))
            }
        }
    }

    fn fan_in(&self, weight_shape: &[usize]) -> usize {
        match self {
            LayerKind::Conv { .. } | LayerKind::Dense { .. } => weight_shape[1..].iter().product(),
            // (C_in, C_out, k, k): each output sums over C_in * k * k taps at most
            LayerKind::ConvTranspose { .. } => weight_shape[0] * weight_shape[2] * weight_shape[3],
            _ => 1,
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerKind::Conv { out_channels, kernel, stride, padding, fused_relu } => {
                write!(f, "conv {out_channels} k={kernel} s={stride} p={padding}")?;
                if fused_relu {
                    write!(f, " relu")?;
                }
                Ok(())
            }
            LayerKind::ConvTranspose { out_channels, kernel, stride, padding, output_padding, fused_relu } => {
                write!(
                    f,
                    "convt {out_channels} k={kernel} s={stride} p={padding} op={}x{}",
                    output_padding[0], output_padding[1]
                )?;
                if fused_relu {
                    write!(f, " relu")?;
                }
                Ok(())
            }
            LayerKind::Relu => write!(f, "relu"),
            LayerKind::MaxPool { kernel, stride } => write!(f, "maxpool {kernel} s={stride}"),
            LayerKind::Flatten => write!(f, "flatten"),
            LayerKind::Dense { out_features } => write!(f, "dense {out_features}"),
            LayerKind::Softmax => write!(f, "softmax"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub index: usize,
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl LayerSpec {
    pub fn output_size(&self) -> usize {
        self.output_shape.iter().product()
    }

    /// True when the output is a (C,H,W) feature map.
    pub fn is_spatial(&self) -> bool {
        self.output_shape.len() == 3
    }
}

/// Where a model's weights came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Metadata {
    pub dataset_id: String,
    pub seed: u64,
    pub epochs: usize,
    #[serde(default)]
    pub role: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

/// Textual layer list, one layer per line or `;`-separated.
///
/// ```text
/// conv 8 k=3 s=1 p=1; relu; maxpool 2; flatten; dense 64; relu; dense C
/// ```
///
/// `dense C` (or `dense classes`) sizes the layer to the class count.
/// A `name=...` argument overrides the generated layer name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub layers: Vec<ArchLayer>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchLayer {
    pub name: Option<String>,
    pub kind: ArchKind,
}

/// Like [`LayerKind`] but the class count may still be symbolic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchKind {
    Concrete(LayerKind),
    DenseClasses,
}

pub const PRESETS: [&str; 3] = ["vgg-micro", "vgg-nano", "mlp-baseline"];

impl Architecture {
    pub fn preset(name: &str) -> Result<Self, ModelError> {
        let text = match name {
            "vgg-micro" => {
                "conv 8; relu; maxpool 2; conv 16; relu; maxpool 2; conv 32; relu; maxpool 2; \
                 conv 32; relu; maxpool 2; flatten; dense 64; relu; dense C"
            }
            "vgg-nano" => "conv 8; relu; maxpool 2; conv 16; relu; maxpool 2; flatten; dense 64; relu; dense C",
            "mlp-baseline" => "flatten; dense 64; relu; dense C",
            other => return Err(ModelError::UnknownPreset(other.to_string())),
        };
        Self::parse(text)
    }

    /// A preset name or a literal layer list.
    pub fn resolve(text: &str) -> Result<Self, ModelError> {
        if PRESETS.contains(&text.trim()) {
            Self::preset(text.trim())
        } else {
            Self::parse(text)
        }
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut layers = Vec::new();
        for (line, stmt) in text.split(['\n', ';']).enumerate() {
            let stmt = stmt.split('#').next().unwrap_or("").trim();
            if stmt.is_empty() {
                continue;
            }
            layers.push(parse_layer(stmt).map_err(|detail| ModelError::Parse { line: line + 1, detail })?);
        }
        if layers.is_empty() {
            return Err(ModelError::EmptyArchitecture);
        }
        Ok(Self { layers })
    }
}

fn parse_layer(stmt: &str) -> Result<ArchLayer, String> {
    let mut tokens = stmt.split_whitespace();
    let kind = tokens.next().unwrap_or_default().to_ascii_lowercase();
    let mut positional = Vec::new();
    let mut named = Vec::new();
    let mut flags = Vec::new();
    let mut name = None;
    for tok in tokens {
        if let Some((k, v)) = tok.split_once('=') {
            if k == "name" {
                name = Some(v.to_string());
            } else {
                named.push((k.to_string(), v.to_string()));
            }
        } else if tok.chars().next().is_some_and(|c| c.is_ascii_digit()) || tok == "C" || tok == "classes" {
            positional.push(tok.to_string());
        } else {
            flags.push(tok.to_string());
        }
    }
    let num = |key: &str, pos: usize, default: Option<usize>| -> Result<usize, String> {
        let raw = named
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .or_else(|| positional.get(pos).cloned());
        match raw {
            Some(v) => v.parse::<usize>().map_err(|_| format!("{kind}: {key}={v} is not a non-negative integer")),
            None => default.ok_or_else(|| format!("{kind}: missing {key}")),
        }
    };
    // `op=1` applies to both axes, `op=1x0` is rows x cols
    let pair = |key: &str, pos: usize, default: [usize; 2]| -> Result<[usize; 2], String> {
        let raw = named
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .or_else(|| positional.get(pos).cloned());
        let Some(v) = raw else { return Ok(default) };
        let parse = |t: &str| t.parse::<usize>().map_err(|_| format!("{kind}: {key}={v} is not a non-negative integer"));
        match v.split_once('x') {
            Some((a, b)) => Ok([parse(a)?, parse(b)?]),
            None => parse(&v).map(|a| [a, a]),
        }
    };
    let relu_flag = flags.iter().any(|f| f == "relu");
    if let Some(bad) = flags.iter().find(|f| *f != "relu") {
        return Err(format!("{kind}: unexpected token {bad:?}"));
    }
    let concrete = |k: LayerKind| Ok(ArchLayer { name: name.clone(), kind: ArchKind::Concrete(k) });
    match kind.as_str() {
        "conv" => concrete(LayerKind::Conv {
            out_channels: num("out", 0, None)?,
            kernel: num("k", 1, Some(3))?,
            stride: num("s", 2, Some(1))?,
            padding: num("p", 3, Some(1))?,
            fused_relu: relu_flag,
        }),
        "convt" | "conv_transpose" => concrete(LayerKind::ConvTranspose {
            out_channels: num("out", 0, None)?,
            kernel: num("k", 1, Some(3))?,
            stride: num("s", 2, Some(2))?,
            padding: num("p", 3, Some(1))?,
            output_padding: pair("op", 4, [1, 1])?,
            fused_relu: relu_flag,
        }),
        "relu" => concrete(LayerKind::Relu),
        "maxpool" | "pool" => {
            let k = num("k", 0, Some(2))?;
            concrete(LayerKind::MaxPool { kernel: k, stride: num("s", 1, Some(k))? })
        }
        "flatten" => concrete(LayerKind::Flatten),
        "softmax" => concrete(LayerKind::Softmax),
        "dense" | "fc" => {
            let symbolic = named.iter().any(|(k, v)| k == "out" && (v == "C" || v == "classes"))
                || positional.first().is_some_and(|v| v == "C" || v == "classes");
            if symbolic {
                Ok(ArchLayer { name, kind: ArchKind::DenseClasses })
            } else {
                concrete(LayerKind::Dense { out_features: num("out", 0, None)? })
            }
        }
        "" => Err("empty layer".into()),
        other => Err(format!("unknown layer kind {other:?}")),
    }
}

/// Keras-like names: `block{b}_conv{j}`, `block{b}_relu{j}`, `block{b}_pool`,
/// then `flatten`, `fc{n}`, `fc{n}_relu`, and `logits` for the last dense layer.
fn auto_names(kinds: &[LayerKind]) -> Vec<String> {
    let last_dense = kinds.iter().rposition(|k| matches!(k, LayerKind::Dense { .. }));
    let (mut block, mut conv, mut fc) = (1, 0, 0);
    let mut after_flatten = false;
    let mut prev_dense = false;
    kinds
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let name = match kind {
                LayerKind::Conv { .. } => {
                    conv += 1;
                    format!("block{block}_conv{conv}")
                }
                LayerKind::ConvTranspose { .. } => format!("deconv{i}"),
                LayerKind::Relu if after_flatten || prev_dense => format!("fc{fc}_relu"),
                LayerKind::Relu => format!("block{block}_relu{}", conv.max(1)),
                LayerKind::MaxPool { .. } => {
                    let n = format!("block{block}_pool");
                    block += 1;
                    conv = 0;
                    n
                }
                LayerKind::Flatten => {
                    after_flatten = true;
                    "flatten".to_string()
                }
                LayerKind::Dense { .. } if Some(i) == last_dense => "logits".to_string(),
                LayerKind::Dense { .. } => {
                    fc += 1;
                    format!("fc{fc}")
                }
                LayerKind::Softmax => "softmax".to_string(),
            };
            prev_dense = matches!(kind, LayerKind::Dense { .. });
            name
        })
        .collect()
}

/// Sequential model: layer table plus one (weight, bias) pair per
/// parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    input_shape: Vec<usize>,
    class_count: usize,
    layers: Vec<LayerSpec>,
    params: Vec<Option<LayerParams<T>>>,
    pub metadata: Metadata,
}

/// Per-layer random initialization: uniform in `±sqrt(1/fan_in)` for weights,
/// zero biases. Each layer draws from its own ChaCha stream so re-initializing
/// a suffix of the network with the build seed reproduces the built weights.
pub fn init_layer_params<T: Scalar>(spec: &LayerSpec, seed: u64) -> Option<LayerParams<T>> {
    let (_, shapes) = spec.kind.infer(&spec.input_shape).ok()?;
    let (wshape, bshape) = shapes?;
    let bound = (1.0 / spec.kind.fan_in(&wshape) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(spec.index as u64);
    let weight = Tensor::from_fn(&wshape, |_| T::from_f64(rng.random_range(-bound..bound)));
    Some(LayerParams {
        weight,
        bias: Tensor::zeros(&bshape),
    })
}

fn chain(input_shape: &[usize], named: Vec<(String, LayerKind)>) -> Result<Vec<LayerSpec>, ModelError> {
    let mut shape = input_shape.to_vec();
    let mut specs = Vec::with_capacity(named.len());
    for (index, (name, kind)) in named.into_iter().enumerate() {
        let (out, _) = kind.infer(&shape).map_err(|detail| ModelError::ShapeChain {
            index,
            name: name.clone(),
            detail,
        })?;
        specs.push(LayerSpec {
            index,
            name,
            kind,
            input_shape: std::mem::replace(&mut shape, out.clone()),
            output_shape: out,
        });
    }
    Ok(specs)
}

/// Builds and initializes a full classifier; its output must be `(class_count,)`.
pub fn build_model<T: Scalar>(
    arch: &Architecture,
    input_shape: &[usize],
    class_count: usize,
    seed: u64,
) -> Result<Model<T>, ModelError> {
    if arch.layers.is_empty() {
        return Err(ModelError::EmptyArchitecture);
    }
    let kinds: Vec<LayerKind> = arch
        .layers
        .iter()
        .map(|l| match &l.kind {
            ArchKind::Concrete(k) => k.clone(),
            ArchKind::DenseClasses => LayerKind::Dense { out_features: class_count },
        })
        .collect();
    let names = auto_names(&kinds);
    let named = arch
        .layers
        .iter()
        .zip(names)
        .zip(kinds)
        .map(|((layer, auto), kind)| (layer.name.clone().unwrap_or(auto), kind))
        .collect();
    let model = Model::initialized(input_shape, class_count, named, seed)?;
    let out = model.output_shape().to_vec();
    if out != [class_count] {
        return Err(ModelError::OutputShape { actual: out, classes: class_count });
    }
    Ok(model)
}

impl<T: Scalar> Model<T> {
    /// Shape-checks `named` against `input_shape` and initializes parameters.
    pub fn initialized(
        input_shape: &[usize],
        class_count: usize,
        named: Vec<(String, LayerKind)>,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if named.is_empty() {
            return Err(ModelError::EmptyArchitecture);
        }
        let layers = chain(input_shape, named)?;
        let params = layers.iter().map(|s| init_layer_params(s, seed)).collect();
        Ok(Self {
            input_shape: input_shape.to_vec(),
            class_count,
            layers,
            params,
            metadata: Metadata {
                seed,
                ..Metadata::default()
            },
        })
    }

    /// Assembles a model from explicit layers and parameters, validating both.
    pub fn from_parts(
        input_shape: &[usize],
        class_count: usize,
        layers: Vec<(String, LayerKind, Option<LayerParams<T>>)>,
        metadata: Metadata,
    ) -> Result<Self, ModelError> {
        if layers.is_empty() {
            return Err(ModelError::EmptyArchitecture);
        }
        let (named, params): (Vec<_>, Vec<_>) = layers.into_iter().map(|(n, k, p)| ((n, k), p)).unzip();
        let specs = chain(input_shape, named)?;
        for (spec, p) in specs.iter().zip(&params) {
            let (_, shapes) = spec.kind.infer(&spec.input_shape).expect("validated by chain");
            let err = |detail: String| ModelError::Params {
                index: spec.index,
                name: spec.name.clone(),
                detail,
            };
            match (shapes, p) {
                (None, None) => {}
                (Some((w, b)), Some(p)) => {
                    p.weight.expect_shape(&w).map_err(|e| err(format!("weight: {e}")))?;
                    p.bias.expect_shape(&b).map_err(|e| err(format!("bias: {e}")))?;
                }
                (Some(_), None) => return Err(err("missing weight and bias".into())),
                (None, Some(_)) => return Err(err(format!("{} layers take no parameters", spec.kind.name()))),
            }
        }
        Ok(Self {
            input_shape: input_shape.to_vec(),
            class_count,
            layers: specs,
            params,
            metadata,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.layers.last().expect("models are never empty").output_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Result<&LayerSpec, ModelError> {
        self.layers.get(index).ok_or(ModelError::LayerIndex {
            index,
            count: self.layers.len(),
        })
    }

    pub fn layer_by_name(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layer_params(&self, index: usize) -> Option<&LayerParams<T>> {
        self.params.get(index).and_then(Option::as_ref)
    }

    pub fn layer_params_mut(&mut self, index: usize) -> Option<&mut LayerParams<T>> {
        self.params.get_mut(index).and_then(Option::as_mut)
    }

    pub fn param(&self, index: usize, role: ParamRole) -> Option<&Tensor<T>> {
        self.layer_params(index).map(|p| match role {
            ParamRole::Weight => &p.weight,
            ParamRole::Bias => &p.bias,
        })
    }

    /// All parameter tensors in layer order, weight before bias.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.params
            .iter()
            .flatten()
            .flat_map(|p| [&p.weight, &p.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.weight, &mut p.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// CRC32 over every parameter's bit pattern, for cheap equality checks.
    pub fn fingerprint(&self) -> u32 {
        let mut hasher = crc32fast::Hasher::new();
        for p in self.params() {
            for &v in p.data() {
                hasher.update(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        hasher.finalize()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            input_shape: self.input_shape.clone(),
            class_count: self.class_count,
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|p| {
                    p.as_ref().map(|p| LayerParams {
                        weight: p.weight.cast(),
                        bias: p.bias.cast(),
                    })
                })
                .collect(),
            metadata: self.metadata.clone(),
        }
    }

    /// Element count of every layer's output.
    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(LayerSpec::output_size).collect()
    }

    /// Layers with (C,H,W) outputs: the ones that have an importance map.
    pub fn spatial_layers(&self) -> Vec<usize> {
        self.layers.iter().filter(|l| l.is_spatial()).map(|l| l.index).collect()
    }

    /// Re-draws the parameters of every layer deeper than `layer`.
    pub fn reinitialize_after(&mut self, layer: usize, seed: u64) {
        for spec in self.layers.iter().filter(|s| s.index > layer) {
            self.params[spec.index] = init_layer_params(spec, seed);
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<(), ModelError> {
        x.expect_shape(&self.input_shape).map_err(ModelError::from)
    }

    fn apply(&self, index: usize, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let spec = &self.layers[index];
        let params = self.params[index].as_ref();
        let p = || params.expect("parameterized layers always carry params");
        let out = match spec.kind {
            LayerKind::Conv { stride, padding, fused_relu, .. } => {
                let p = p();
                let y = kernels::conv2d(x, &p.weight, &p.bias, ConvGeometry { stride, padding })?;
                if fused_relu {
                    autodiff::relu(&y)
                } else {
                    y
                }
            }
            LayerKind::ConvTranspose { stride, padding, output_padding, fused_relu, .. } => {
                let p = p();
                let y = kernels::conv_transpose2d(x, &p.weight, &p.bias, ConvGeometry { stride, padding }, output_padding)?;
                if fused_relu {
                    autodiff::relu(&y)
                } else {
                    y
                }
            }
            LayerKind::Relu => autodiff::relu(x),
            LayerKind::MaxPool { kernel, stride } => kernels::maxpool2d(x, kernel, stride)?.0,
            LayerKind::Flatten => x.reshape(&spec.output_shape)?,
            LayerKind::Dense { .. } => {
                let p = p();
                kernels::dense(x, &p.weight, &p.bias)?
            }
            LayerKind::Softmax => Tensor::new(x.shape().to_vec(), kernels::softmax(x.data()))?,
        };
        Ok(out)
    }

    /// Plain inference without recording anything.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(x)?;
        let mut cur = self.apply(0, x)?;
        for i in 1..self.layers.len() {
            cur = self.apply(i, &cur)?;
        }
        Ok(cur)
    }

    /// Runs layers `range` on an input shaped like `layers[range.start].input_shape`.
    pub fn forward_range(&self, x: &Tensor<T>, range: Range<usize>) -> Result<Tensor<T>, ModelError> {
        let first = self.layer(range.start)?;
        x.expect_shape(&first.input_shape)?;
        let mut cur = x.clone();
        for i in range {
            cur = self.apply(i, &cur)?;
        }
        Ok(cur)
    }

    /// Every layer output, in order.
    pub fn forward_all(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>, ModelError> {
        self.check_input(x)?;
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.layers.len());
        for i in 0..self.layers.len() {
            let y = self.apply(i, outs.last().unwrap_or(x))?;
            outs.push(y);
        }
        Ok(outs)
    }

    /// Records layers `range` on `tape`, starting from `input`.
    pub fn record_range<'a>(
        &'a self,
        tape: &mut Tape<'a, T>,
        input: Var,
        range: Range<usize>,
    ) -> Result<Recorded, ModelError> {
        let first = self.layer(range.start)?;
        tape.value(input)?.expect_shape(&first.input_shape)?;
        let mut activations = Vec::with_capacity(range.len());
        let mut params = Vec::with_capacity(range.len());
        let mut cur = input;
        for i in range {
            let spec = &self.layers[i];
            let pv = self.params[i].as_ref().map(|p| ParamVars {
                weight: tape.leaf_ref(&p.weight),
                bias: tape.leaf_ref(&p.bias),
            });
            let pvar = || pv.expect("parameterized layers always carry params");
            cur = match spec.kind {
                LayerKind::Conv { stride, padding, fused_relu, .. } => {
                    let y = tape.conv2d(cur, pvar().weight, pvar().bias, stride, padding)?;
                    if fused_relu {
                        tape.relu(y)?
                    } else {
                        y
                    }
                }
                LayerKind::ConvTranspose { stride, padding, output_padding, fused_relu, .. } => {
                    let y = tape.conv_transpose2d(cur, pvar().weight, pvar().bias, stride, padding, output_padding)?;
                    if fused_relu {
                        tape.relu(y)?
                    } else {
                        y
                    }
                }
                LayerKind::Relu => tape.relu(cur)?,
                LayerKind::MaxPool { kernel, stride } => tape.maxpool2d(cur, kernel, stride)?,
                LayerKind::Flatten => tape.reshape(cur, &spec.output_shape)?,
                LayerKind::Dense { .. } => tape.dense(cur, pvar().weight, pvar().bias)?,
                LayerKind::Softmax => tape.softmax(cur)?,
            };
            activations.push(cur);
            params.push(pv);
        }
        Ok(Recorded {
            output: cur,
            activations,
            params,
        })
    }

    pub fn record<'a>(&'a self, tape: &mut Tape<'a, T>, input: Var) -> Result<Recorded, ModelError> {
        self.record_range(tape, input, 0..self.layers.len())
    }

    /// Copies layers `range` into a standalone model with indices renumbered from 0.
    pub fn slice(&self, range: Range<usize>) -> Result<Model<T>, ModelError> {
        if range.is_empty() || range.end > self.layers.len() {
            return Err(ModelError::LayerIndex {
                index: range.end,
                count: self.layers.len(),
            });
        }
        let input = self.layers[range.start].input_shape.clone();
        let parts = range
            .map(|i| (self.layers[i].name.clone(), self.layers[i].kind.clone(), self.params[i].clone()))
            .collect();
        Model::from_parts(&input, self.class_count, parts, self.metadata.clone())
    }

    /// Layers of `self` followed by layers of `next`.
    pub fn concat(&self, next: &Model<T>) -> Result<Model<T>, ModelError> {
        let parts = self
            .layers
            .iter()
            .zip(&self.params)
            .chain(next.layers.iter().zip(&next.params))
            .map(|(l, p)| (l.name.clone(), l.kind.clone(), p.clone()))
            .collect();
        let classes = self.class_count.max(next.class_count);
        Model::from_parts(&self.input_shape, classes, parts, self.metadata.clone())
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<usize, ModelError> {
        Ok(self.forward(x)?.argmax())
    }
}

/// Tape handles produced by recording a model.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub output: Var,
    /// One entry per recorded layer, in order.
    pub activations: Vec<Var>,
    pub params: Vec<Option<ParamVars>>,
}

impl Recorded {
    pub fn param_vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.params.iter().flatten().flat_map(|p| [p.weight, p.bias])
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub weight: Var,
    pub bias: Var,
}

/// Result of a traced forward pass over a whole model.
pub struct Retained<'a, T: Scalar> {
    pub tape: Tape<'a, T>,
    pub input: Var,
    pub recorded: Recorded,
}

impl<T: Scalar> Retained<'_, T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.tape.value(self.recorded.output).expect("own tape")
    }

    pub fn activation(&self, layer: usize) -> Option<&Tensor<T>> {
        self.recorded
            .activations
            .get(layer)
            .map(|&v| self.tape.value(v).expect("own tape"))
    }
}

/// Forward pass that keeps every layer output on a fresh tape.
pub fn forward_retaining<'a, T: Scalar>(model: &'a Model<T>, image: &Tensor<T>) -> Result<Retained<'a, T>, ModelError> {
    model.check_input(image)?;
    let mut tape = Tape::new();
    let input = tape.leaf(image.clone());
    let recorded = model.record(&mut tape, input)?;
    Ok(Retained { tape, input, recorded })
}

/// A model partitioned after `target_layer`. Head runs on the device, tail on
/// the server; with a bottleneck, the encoder closes the head and the decoder
/// opens the tail.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan<T: Scalar = f32> {
    pub target_layer: usize,
    pub head: Model<T>,
    pub tail: Model<T>,
    pub bottleneck: Option<BottleneckSpec>,
}

impl<T: Scalar> SplitPlan<T> {
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let latent = self.head.forward(x)?;
        self.tail.forward(&latent)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<usize, ModelError> {
        Ok(self.infer(x)?.argmax())
    }

    /// Bytes leaving the device per image as f32 payload.
    pub fn payload_bytes(&self) -> usize {
        self.head.output_shape().iter().product::<usize>() * 4
    }
}

/// Cuts `model` after layer `target` with no bottleneck.
pub fn split<T: Scalar>(model: &Model<T>, target: usize) -> Result<SplitPlan<T>, ModelError> {
    let last = model.len() - 1;
    if target >= last {
        return Err(ModelError::SplitIndex { index: target, last });
    }
    let mut head = model.slice(0..target + 1)?;
    let mut tail = model.slice(target + 1..model.len())?;
    head.metadata.role = "head".into();
    tail.metadata.role = "tail".into();
    Ok(SplitPlan {
        target_layer: target,
        head,
        tail,
        bottleneck: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(seed: u64) -> Model<f32> {
        build_model(&Architecture::preset("vgg-micro").unwrap(), &[1, 16, 16], 8, seed).unwrap()
    }

    #[test]
    fn vgg_micro_layout() {
        let m = micro(1);
        assert_eq!(m.len(), 16);
        let kinds: Vec<&str> = m.layers().iter().map(|l| l.kind.name()).collect();
        assert_eq!(&kinds[..3], &["conv", "relu", "maxpool"]);
        assert_eq!(&kinds[12..], &["flatten", "dense", "relu", "dense"]);
        assert_eq!(m.layers()[2].name, "block1_pool");
        assert_eq!(m.layers()[9].name, "block4_conv1");
        assert_eq!(m.layers()[15].name, "logits");
        assert_eq!(m.output_shape(), &[8]);
        let convs: Vec<usize> = m
            .layers()
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Conv { out_channels, .. } => Some(out_channels),
                _ => None,
            })
            .collect();
        assert_eq!(convs, vec![8, 16, 32, 32]);
        for pair in m.layers().windows(2) {
            assert_eq!(pair[0].output_shape, pair[1].input_shape);
        }
        for (i, l) in m.layers().iter().enumerate() {
            assert_eq!(l.index, i);
            assert_eq!(m.layer_params(i).is_some(), l.kind.has_params());
        }
    }

    #[test]
    fn empty_architecture_is_rejected() {
        assert_eq!(Architecture::parse("  ;\n# nothing").unwrap_err(), ModelError::EmptyArchitecture);
        let arch = Architecture { layers: vec![] };
        assert_eq!(build_model::<f32>(&arch, &[1, 8, 8], 2, 0).unwrap_err(), ModelError::EmptyArchitecture);
    }

    #[test]
    fn same_seed_same_parameters() {
        let (a, b) = (micro(7), micro(7));
        let bits = |m: &Model<f32>| m.params().iter().flat_map(|t| t.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(a.fingerprint(), micro(8).fingerprint());
    }

    #[test]
    fn shape_chain_break_names_the_layer() {
        let arch = Architecture::parse("conv 4; maxpool 2; maxpool 2; maxpool 2; flatten; dense C").unwrap();
        let err = build_model::<f32>(&arch, &[1, 4, 4], 3, 0).unwrap_err();
        match err {
            ModelError::ShapeChain { index, name, .. } => {
                assert_eq!(index, 3);
                assert_eq!(name, "block3_pool");
            }
            other => panic!("unexpected {other:?}"),
        }
        let arch = Architecture::parse("conv 4; dense C").unwrap();
        assert!(matches!(
            build_model::<f32>(&arch, &[1, 4, 4], 3, 0),
            Err(ModelError::ShapeChain { index: 1, .. })
        ));
    }

    #[test]
    fn output_must_match_class_count() {
        let arch = Architecture::parse("flatten; dense 5").unwrap();
        assert!(matches!(
            build_model::<f32>(&arch, &[1, 4, 4], 3, 0),
            Err(ModelError::OutputShape { .. })
        ));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = Architecture::parse("conv 8\nrelu\nwobble 3").unwrap_err();
        assert!(matches!(err, ModelError::Parse { line: 3, .. }), "{err}");
        assert!(Architecture::parse("conv k=3").is_err());
        assert!(Architecture::parse("conv 8 sideways").is_err());
    }

    #[test]
    fn parse_explicit_arguments_and_names() {
        let arch = Architecture::parse("conv out=4 k=5 s=2 p=2 name=stem; convt 3 k=3 s=2 p=1 op=1x0 relu").unwrap();
        assert_eq!(arch.layers[0].name.as_deref(), Some("stem"));
        assert_eq!(
            arch.layers[0].kind,
            ArchKind::Concrete(LayerKind::Conv { out_channels: 4, kernel: 5, stride: 2, padding: 2, fused_relu: false })
        );
        assert_eq!(
            arch.layers[1].kind,
            ArchKind::Concrete(LayerKind::ConvTranspose {
                out_channels: 3,
                kernel: 3,
                stride: 2,
                padding: 1,
                output_padding: [1, 0],
                fused_relu: true
            })
        );
    }

    #[test]
    fn layer_sizes_drop_across_pools() {
        let m = micro(0);
        let sizes = m.layer_sizes();
        for l in m.layers() {
            if matches!(l.kind, LayerKind::MaxPool { .. }) {
                assert!(sizes[l.index] < sizes[l.index - 1]);
            }
            if matches!(l.kind, LayerKind::Flatten) {
                assert_eq!(sizes[l.index], sizes[l.index - 1]);
            }
        }
    }

    #[test]
    fn dense_after_flatten_of_512() {
        let arch = Architecture::parse("flatten; dense 64; relu; dense C").unwrap();
        let m = build_model::<f32>(&arch, &[32, 4, 4], 10, 0).unwrap();
        assert_eq!(m.layer_sizes(), vec![512, 64, 64, 10]);
    }

    #[test]
    fn retained_forward_matches_plain_forward() {
        let m = micro(3);
        let x = Tensor::from_fn(&[1, 16, 16], |i| ((i * 37) % 11) as f32 / 11.0);
        let plain = m.forward(&x).unwrap();
        let traced = forward_retaining(&m, &x).unwrap();
        assert_eq!(traced.recorded.activations.len(), m.len());
        assert_eq!(traced.logits().to_bits(), plain.to_bits());
        let all = m.forward_all(&x).unwrap();
        for (i, a) in all.iter().enumerate() {
            assert_eq!(traced.activation(i).unwrap(), a);
        }
    }

    #[test]
    fn logit_gradient_at_last_hidden_layer_is_weight_row() {
        // logits = W2 relu(h) + b2, so d logit_c / d relu_out = W2[c, :].
        let m = micro(5).cast::<f64>();
        let x = Tensor::from_fn(&[1, 16, 16], |i| ((i * 13) % 7) as f64 / 7.0);
        let traced = forward_retaining(&m, &x).unwrap();
        let mut tape = traced.tape;
        let c = 3;
        let y = tape.select(traced.recorded.output, c).unwrap();
        let g = tape.backward(y).unwrap();
        let relu_out = traced.recorded.activations[14];
        let w2 = &m.layer_params(15).unwrap().weight;
        let row = &w2.data()[c * 64..(c + 1) * 64];
        assert_eq!(g.get(relu_out).unwrap().data(), row);
        // one layer further: through the ReLU mask into the fc1 output
        let fc1 = traced.recorded.activations[13];
        let h = tape.value(fc1).unwrap();
        let expected: Vec<f64> = h.data().iter().zip(row).map(|(&v, &w)| if v > 0.0 { w } else { 0.0 }).collect();
        assert_eq!(g.get(fc1).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn split_head_tail_compose_bitwise() {
        let m = micro(11);
        let x = Tensor::from_fn(&[1, 16, 16], |i| ((i * 29) % 17) as f32 / 17.0);
        let full = m.forward(&x).unwrap();
        for t in 0..m.len() - 1 {
            let plan = split(&m, t).unwrap();
            assert_eq!(plan.head.len(), t + 1);
            assert_eq!(plan.head.len() + plan.tail.len(), m.len());
            assert_eq!(plan.infer(&x).unwrap().to_bits(), full.to_bits(), "split at {t}");
        }
        assert!(matches!(split(&m, m.len() - 1), Err(ModelError::SplitIndex { .. })));
    }

    #[test]
    fn reinitialize_with_build_seed_is_identity() {
        let m = micro(21);
        let mut copy = m.clone();
        copy.reinitialize_after(3, 21);
        assert_eq!(copy.fingerprint(), m.fingerprint());
        copy.reinitialize_after(3, 22);
        assert_ne!(copy.fingerprint(), m.fingerprint());
        for i in 0..=3 {
            assert_eq!(copy.layer_params(i), m.layer_params(i));
        }
    }

    #[test]
    fn from_parts_validates_parameter_shapes() {
        let m = micro(1);
        let mut parts: Vec<_> = (0..3)
            .map(|i| (m.layers()[i].name.clone(), m.layers()[i].kind.clone(), m.layer_params(i).cloned()))
            .collect();
        parts[0].2.as_mut().unwrap().bias = Tensor::zeros(&[9]);
        assert!(matches!(
            Model::from_parts(&[1, 16, 16], 8, parts, Metadata::default()),
            Err(ModelError::Params { index: 0, .. })
        ));
    }
}
