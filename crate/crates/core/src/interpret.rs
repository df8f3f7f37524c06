//! Layer-wise Grad-CAM importance, cumulated-importance (CUI) curves and
//! split-point selection.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Gradients;
use crate::model::{forward_retaining, Model, ModelError};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("layer {index} ({kind}) has no spatial feature map")]
    UnsupportedLayer { index: usize, kind: &'static str },
    #[error("class {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },
    #[error("no images in scope")]
    EmptyImageSet,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("rank correlation undefined: one side has zero variance")]
    ZeroVariance,
    #[error("thread pool: {0}")]
    ThreadPool(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<crate::error::AutodiffError> for InterpretError {
    fn from(e: crate::error::AutodiffError) -> Self {
        InterpretError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

/// Which saliency map feeds the curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// `ReLU(sum_k alpha_k F_k)`
    #[default]
    GradCam,
    /// `ReLU(sum_k alpha_k)`, the feature map dropped.
    Gradients,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::GradCam => "gradcam",
            Method::Gradients => "gradients",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector<T: Scalar> {
    pub layer: usize,
    pub class: usize,
    pub values: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceMap<T: Scalar> {
    pub layer: usize,
    pub class: usize,
    /// `(H, W)` of the layer output, every entry non-negative.
    pub map: Tensor<T>,
}

fn spatial_check<T: Scalar>(model: &Model<T>, layer: usize) -> Result<(usize, usize, usize), InterpretError> {
    let spec = model.layer(layer)?;
    match *spec.output_shape.as_slice() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(InterpretError::UnsupportedLayer {
            index: layer,
            kind: spec.kind.name(),
        }),
    }
}

fn class_check<T: Scalar>(model: &Model<T>, class: usize) -> Result<(), InterpretError> {
    if class >= model.class_count() {
        return Err(InterpretError::ClassOutOfRange {
            class,
            classes: model.class_count(),
        });
    }
    Ok(())
}

/// Feature maps and logit gradients for every layer, from one forward and one
/// backward pass.
struct Traced<T: Scalar> {
    features: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
}

fn trace<T: Scalar>(model: &Model<T>, image: &Tensor<T>, class: usize, layers: &[usize]) -> Result<Traced<T>, InterpretError> {
    class_check(model, class)?;
    let retained = forward_retaining(model, image)?;
    let mut tape = retained.tape;
    let logit = tape.select(retained.recorded.output, class)?;
    let mut grads: Gradients<T> = tape.backward(logit)?;
    let mut features = Vec::with_capacity(layers.len());
    let mut out = Vec::with_capacity(layers.len());
    for &l in layers {
        let v = retained.recorded.activations[l];
        features.push(tape.value(v)?.clone());
        out.push(grads.take(v)?);
    }
    Ok(Traced { features, grads: out })
}

fn alpha_of<T: Scalar>(grad: &Tensor<T>) -> Vec<T> {
    let &[c, h, w] = grad.shape() else { unreachable!("spatial layer") };
    let hw = h * w;
    let norm = T::from_f64(hw as f64);
    (0..c).map(|k| grad.data()[k * hw..(k + 1) * hw].iter().copied().sum::<T>() / norm).collect()
}

fn map_of<T: Scalar>(alpha: &[T], feature: &Tensor<T>, method: Method) -> Tensor<T> {
    let &[c, h, w] = feature.shape() else { unreachable!("spatial layer") };
    let hw = h * w;
    let data = match method {
        Method::GradCam => {
            let mut acc = vec![T::zero(); hw];
            for (k, &a) in alpha.iter().enumerate().take(c) {
                for (o, &f) in acc.iter_mut().zip(&feature.data()[k * hw..(k + 1) * hw]) {
                    *o += a * f;
                }
            }
            acc
        }
        Method::Gradients => vec![alpha.iter().copied().sum::<T>(); hw],
    };
    let relu = data.into_iter().map(|v| if v > T::zero() { v } else { T::zero() }).collect();
    Tensor::new(vec![h, w], relu).expect("shape matches data")
}

/// `alpha_k = mean_{h,w} d y^c / d F^layer_{k,h,w}`, with `y^c` the pre-softmax logit.
pub fn gradcam_alpha<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    class: usize,
    layer: usize,
) -> Result<AlphaVector<T>, InterpretError> {
    spatial_check(model, layer)?;
    let t = trace(model, image, class, &[layer])?;
    Ok(AlphaVector {
        layer,
        class,
        values: alpha_of(&t.grads[0]),
    })
}

pub fn gradcam_map<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    class: usize,
    layer: usize,
) -> Result<ImportanceMap<T>, InterpretError> {
    importance_map(model, image, class, layer, Method::GradCam)
}

pub fn importance_map<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    class: usize,
    layer: usize,
    method: Method,
) -> Result<ImportanceMap<T>, InterpretError> {
    spatial_check(model, layer)?;
    let t = trace(model, image, class, &[layer])?;
    Ok(ImportanceMap {
        layer,
        class,
        map: map_of(&alpha_of(&t.grads[0]), &t.features[0], method),
    })
}

/// Maps for every listed spatial layer from a single traced pass.
pub fn importance_maps<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    class: usize,
    layers: &[usize],
    method: Method,
) -> Result<Vec<ImportanceMap<T>>, InterpretError> {
    for &l in layers {
        spatial_check(model, l)?;
    }
    let t = trace(model, image, class, layers)?;
    Ok(layers
        .iter()
        .zip(t.grads.iter().zip(&t.features))
        .map(|(&layer, (g, f))| ImportanceMap {
            layer,
            class,
            map: map_of(&alpha_of(g), f, method),
        })
        .collect())
}

pub fn per_image_cui<T: Scalar>(map: &ImportanceMap<T>, reduction: Reduction) -> f64 {
    let sum: f64 = map.map.data().iter().map(|v| v.as_f64()).sum();
    match reduction {
        Reduction::Sum => sum,
        Reduction::Mean => sum / map.map.numel() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum Scope {
    PerImage { image: usize, class: usize },
    PerClass { class: usize },
    General,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::PerImage { image, class } => write!(f, "image{image}_class{class}"),
            Scope::PerClass { class } => write!(f, "class{class}"),
            Scope::General => write!(f, "general"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_id: String,
    /// `None` means every class.
    pub class_subset: Option<Vec<usize>>,
    pub image_count: usize,
}

/// One non-negative value per evaluated layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuiCurve {
    pub layers: Vec<usize>,
    pub layer_names: Vec<String>,
    pub values: Vec<f64>,
    pub scope: Scope,
    pub reduction: Reduction,
    pub method: Method,
    pub provenance: Provenance,
}

impl CuiCurve {
    pub fn value_at(&self, layer: usize) -> Option<f64> {
        self.layers.iter().position(|&l| l == layer).map(|p| self.values[p])
    }

    /// Layer with the highest value; the deeper one wins ties.
    pub fn argmax_layer(&self) -> Option<usize> {
        select_split_points(self).first().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CuiOptions {
    pub method: Method,
    pub reduction: Reduction,
    /// Restrict to images whose label is in this set.
    pub class_subset: Option<Vec<usize>>,
    /// Layers to evaluate; `None` selects every spatial layer.
    pub layers: Option<Vec<usize>>,
    /// Worker threads; 0 uses the global pool.
    pub parallelism: usize,
    pub dataset_id: String,
    /// Weight every class equally in the general curve regardless of its image count.
    pub class_balanced: bool,
}

/// General curve plus one curve per class present in the scope.
#[derive(Debug, Clone, PartialEq)]
pub struct CuiReport {
    pub general: CuiCurve,
    pub per_class: BTreeMap<usize, CuiCurve>,
}

fn run_in_pool<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R, InterpretError> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| InterpretError::ThreadPool(e.to_string()))?;
    Ok(pool.install(f))
}

/// Per-image CUI rows, `rows[j][l]` for image `j` and evaluated layer `l`.
pub fn per_image_rows<T: Scalar>(
    model: &Model<T>,
    images: &[&Tensor<T>],
    labels: &[usize],
    layers: &[usize],
    method: Method,
    reduction: Reduction,
    parallelism: usize,
) -> Result<Vec<Vec<f64>>, InterpretError> {
    if images.len() != labels.len() {
        return Err(InterpretError::LengthMismatch {
            left: images.len(),
            right: labels.len(),
        });
    }
    for &l in layers {
        spatial_check(model, l)?;
    }
    run_in_pool(parallelism, || {
        images
            .par_iter()
            .zip(labels.par_iter())
            .map(|(img, &label)| {
                let maps = importance_maps(model, img, label, layers, method)?;
                Ok(maps.iter().map(|m| per_image_cui(m, reduction)).collect())
            })
            .collect::<Result<Vec<Vec<f64>>, InterpretError>>()
    })?
}

fn mean_rows(rows: &[&Vec<f64>], width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    for row in rows {
        for (a, v) in acc.iter_mut().zip(row.iter()) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / rows.len() as f64).collect()
}

/// General and per-class CUI curves over the images in scope.
///
/// The general curve is the mean of the per-class means when every class has
/// the same number of images (identical to the image mean in exact
/// arithmetic, and exactly the mean of the per-class curves) or when
/// `class_balanced` is set, otherwise the plain image mean. Reduction order is fixed, so results do not depend on
/// `parallelism`.
pub fn cui_report<T: Scalar>(
    model: &Model<T>,
    images: &[Tensor<T>],
    labels: &[usize],
    opts: &CuiOptions,
) -> Result<CuiReport, InterpretError> {
    if images.len() != labels.len() {
        return Err(InterpretError::LengthMismatch {
            left: images.len(),
            right: labels.len(),
        });
    }
    let layers = opts.layers.clone().unwrap_or_else(|| model.spatial_layers());
    let (sel_images, sel_labels): (Vec<&Tensor<T>>, Vec<usize>) = images
        .iter()
        .zip(labels)
        .filter(|(_, l)| opts.class_subset.as_ref().is_none_or(|s| s.contains(l)))
        .map(|(i, &l)| (i, l))
        .unzip();
    if sel_images.is_empty() {
        return Err(InterpretError::EmptyImageSet);
    }
    let rows = per_image_rows(model, &sel_images, &sel_labels, &layers, opts.method, opts.reduction, opts.parallelism)?;
    let mut by_class: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
    for (row, &l) in rows.iter().zip(&sel_labels) {
        by_class.entry(l).or_default().push(row);
    }
    let names: Vec<String> = layers.iter().map(|&l| model.layers()[l].name.clone()).collect();
    let curve = |values: Vec<f64>, scope: Scope, subset: Option<Vec<usize>>, count: usize| CuiCurve {
        layers: layers.clone(),
        layer_names: names.clone(),
        values,
        scope,
        reduction: opts.reduction,
        method: opts.method,
        provenance: Provenance {
            dataset_id: opts.dataset_id.clone(),
            class_subset: subset,
            image_count: count,
        },
    };
    let per_class: BTreeMap<usize, CuiCurve> = by_class
        .iter()
        .map(|(&c, rows)| (c, curve(mean_rows(rows, layers.len()), Scope::PerClass { class: c }, Some(vec![c]), rows.len())))
        .collect();
    let balanced = by_class.values().map(Vec::len).collect::<std::collections::BTreeSet<_>>().len() == 1;
    let general_values = if balanced || opts.class_balanced {
        let means: Vec<&Vec<f64>> = per_class.values().map(|c| &c.values).collect();
        mean_rows(&means, layers.len())
    } else {
        mean_rows(&rows.iter().collect::<Vec<_>>(), layers.len())
    };
    let general = curve(general_values, Scope::General, opts.class_subset.clone(), sel_images.len());
    Ok(CuiReport { general, per_class })
}

pub fn cui_curve<T: Scalar>(
    model: &Model<T>,
    images: &[Tensor<T>],
    labels: &[usize],
    opts: &CuiOptions,
) -> Result<CuiCurve, InterpretError> {
    Ok(cui_report(model, images, labels, opts)?.general)
}

/// The same pipeline with the feature map removed from the importance map.
pub fn gradients_baseline_curve<T: Scalar>(
    model: &Model<T>,
    images: &[Tensor<T>],
    labels: &[usize],
    opts: &CuiOptions,
) -> Result<CuiCurve, InterpretError> {
    let opts = CuiOptions {
        method: Method::Gradients,
        ..opts.clone()
    };
    cui_curve(model, images, labels, &opts)
}

/// Strict local maxima of `values` by position, ranked by descending value.
///
/// A run of equal values counts as one maximum when both neighbours are lower
/// (curve ends count as lower); the run reports its deepest position.
pub fn local_maxima(values: &[f64]) -> Vec<usize> {
    let n = values.len();
    let mut found = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && values[end + 1] == values[start] {
            end += 1;
        }
        let v = values[start];
        let left_lower = start == 0 || values[start - 1] < v;
        let right_lower = end == n - 1 || values[end + 1] < v;
        if left_lower && right_lower {
            found.push(end);
        }
        start = end + 1;
    }
    found.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(b.cmp(&a)));
    found
}

/// Candidate split layers: local CUI maxima, best first.
pub fn select_split_points(curve: &CuiCurve) -> Vec<usize> {
    local_maxima(&curve.values).into_iter().map(|p| curve.layers[p]).collect()
}

/// Layers after which the output size shrinks.
pub fn cde_candidates(layer_sizes: &[usize]) -> Vec<usize> {
    layer_sizes
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] < w[0])
        .map(|(i, _)| i)
        .collect()
}

/// Mean absolute map difference after re-drawing every layer deeper than
/// `layer` with `seed`.
pub fn sanity_check<T: Scalar>(
    model: &Model<T>,
    image: &Tensor<T>,
    class: usize,
    layer: usize,
    seed: u64,
) -> Result<f64, InterpretError> {
    let before = gradcam_map(model, image, class, layer)?;
    let mut randomized = model.clone();
    randomized.reinitialize_after(layer, seed);
    let after = gradcam_map(&randomized, image, class, layer)?;
    let total: f64 = before
        .map
        .data()
        .iter()
        .zip(after.map.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
        .sum();
    Ok(total / before.map.numel() as f64)
}

/// Ranks starting at 1, ties sharing the mean of the positions they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn rank_correlation(xs: &[f64], ys: &[f64]) -> Result<f64, InterpretError> {
    if xs.len() != ys.len() {
        return Err(InterpretError::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(InterpretError::TooFewSamples(xs.len()));
    }
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(InterpretError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Architecture, LayerKind, LayerParams, Metadata};

    fn micro() -> Model<f64> {
        build_model(&Architecture::preset("vgg-micro").unwrap(), &[1, 16, 16], 8, 4).unwrap()
    }

    fn image(seed: usize) -> Tensor<f64> {
        Tensor::from_fn(&[1, 16, 16], |i| (((i + seed) * 31) % 13) as f64 / 13.0)
    }

    /// conv (C=2) -> flatten -> dense with all-ones weights, so y = sum F.
    fn identity_tail(c_out: usize) -> Model<f64> {
        let conv = LayerKind::Conv { out_channels: c_out, kernel: 1, stride: 1, padding: 0, fused_relu: false };
        let n = c_out * 3 * 3;
        Model::from_parts(
            &[1, 3, 3],
            1,
            vec![
                (
                    "c".into(),
                    conv,
                    Some(LayerParams {
                        weight: Tensor::from_fn(&[c_out, 1, 1, 1], |k| k as f64 + 1.0),
                        bias: Tensor::zeros(&[c_out]),
                    }),
                ),
                ("f".into(), LayerKind::Flatten, None),
                (
                    "d".into(),
                    LayerKind::Dense { out_features: 1 },
                    Some(LayerParams {
                        weight: Tensor::ones(&[1, n]),
                        bias: Tensor::zeros(&[1]),
                    }),
                ),
            ],
            Metadata::default(),
        )
        .unwrap()
    }

    #[test]
    fn identity_tail_gives_unit_alpha() {
        let m = identity_tail(3);
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64);
        let a = gradcam_alpha(&m, &x, 0, 0).unwrap();
        assert_eq!(a.values, vec![1.0; 3]);
    }

    #[test]
    fn single_channel_unit_alpha_map_is_feature() {
        let m = identity_tail(1);
        let x = Tensor::from_fn(&[1, 3, 3], |i| i as f64 * 0.5);
        let map = gradcam_map(&m, &x, 0, 0).unwrap();
        assert_eq!(map.map.data(), x.data());
    }

    #[test]
    fn zero_tail_gives_zero_alpha_and_map() {
        let mut m = micro();
        for l in [13, 15] {
            let p = m.layer_params_mut(l).unwrap();
            p.weight = Tensor::zeros(p.weight.shape());
        }
        let x = image(1);
        for layer in m.spatial_layers() {
            assert!(gradcam_alpha(&m, &x, 2, layer).unwrap().values.iter().all(|&v| v == 0.0));
            assert!(gradcam_map(&m, &x, 2, layer).unwrap().map.data().iter().all(|&v| v == 0.0));
        }
        let curve = gradients_baseline_curve(&m, &[x], &[2], &CuiOptions::default()).unwrap();
        assert!(curve.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_layer_is_unsupported() {
        let m = micro();
        assert!(matches!(
            gradcam_alpha(&m, &image(0), 0, 13),
            Err(InterpretError::UnsupportedLayer { index: 13, kind: "dense" })
        ));
        assert!(matches!(gradcam_alpha(&m, &image(0), 8, 0), Err(InterpretError::ClassOutOfRange { .. })));
    }

    #[test]
    fn per_image_reductions() {
        let map = ImportanceMap {
            layer: 0,
            class: 0,
            map: Tensor::<f64>::from_slice(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
        };
        assert_eq!(per_image_cui(&map, Reduction::Sum), 10.0);
        assert_eq!(per_image_cui(&map, Reduction::Mean), 2.5);
        let zeros = ImportanceMap { map: Tensor::<f64>::zeros(&[3, 3]), ..map };
        assert_eq!(per_image_cui(&zeros, Reduction::Sum), 0.0);
    }

    #[test]
    fn single_image_curve_is_per_image_cui() {
        let m = micro();
        let x = image(3);
        let curve = cui_curve(&m, &[x.clone()], &[5], &CuiOptions::default()).unwrap();
        for (&layer, &v) in curve.layers.iter().zip(&curve.values) {
            let map = gradcam_map(&m, &x, 5, layer).unwrap();
            assert_eq!(v, per_image_cui(&map, Reduction::Sum));
        }
        assert_eq!(curve.layers, m.spatial_layers());
    }

    #[test]
    fn general_curve_is_mean_of_class_curves() {
        let m = micro();
        let images: Vec<_> = (0..6).map(image).collect();
        let labels = [0, 1, 0, 1, 0, 1];
        let report = cui_report(&m, &images, &labels, &CuiOptions::default()).unwrap();
        let (a, b) = (&report.per_class[&0].values, &report.per_class[&1].values);
        for (i, g) in report.general.values.iter().enumerate() {
            assert_eq!(*g, (a[i] + b[i]) / 2.0);
        }
    }

    #[test]
    fn unbalanced_general_curve_weights() {
        let m = micro();
        let images: Vec<_> = (0..3).map(image).collect();
        let labels = [0, 0, 1];
        let plain = cui_report(&m, &images, &labels, &CuiOptions::default()).unwrap();
        let (a, b) = (&plain.per_class[&0].values, &plain.per_class[&1].values);
        let balanced = cui_report(
            &m,
            &images,
            &labels,
            &CuiOptions {
                class_balanced: true,
                ..CuiOptions::default()
            },
        )
        .unwrap();
        for i in 0..a.len() {
            assert!((plain.general.values[i] - (2.0 * a[i] + b[i]) / 3.0).abs() <= 1e-12 * a[i].abs().max(1.0));
            assert_eq!(balanced.general.values[i], (a[i] + b[i]) / 2.0);
        }
    }

    #[test]
    fn empty_scope_is_an_error() {
        let m = micro();
        let opts = CuiOptions {
            class_subset: Some(vec![7]),
            ..CuiOptions::default()
        };
        assert!(matches!(cui_curve(&m, &[image(0)], &[1], &opts), Err(InterpretError::EmptyImageSet)));
    }

    #[test]
    fn split_point_examples() {
        assert_eq!(local_maxima(&[1.0, 3.0, 2.0, 5.0, 4.0]), vec![3, 1]);
        assert_eq!(local_maxima(&[1.0, 2.0, 3.0, 4.0]), vec![3]);
        assert_eq!(local_maxima(&[1.0, 5.0, 5.0, 2.0]), vec![2]);
        assert_eq!(local_maxima(&[2.0]), vec![0]);
        assert_eq!(local_maxima(&[4.0, 1.0, 4.0]), vec![2, 0]);
    }

    #[test]
    fn cde_examples() {
        assert_eq!(cde_candidates(&[64, 64, 32, 32, 16]), vec![1, 3]);
        assert!(cde_candidates(&[1, 2, 3, 4]).is_empty());
    }

    #[test]
    fn sanity_check_with_build_seed_is_zero() {
        let m = micro();
        assert_eq!(sanity_check(&m, &image(2), 1, 9, 4).unwrap(), 0.0);
        let zero = Tensor::zeros(&[1, 16, 16]);
        assert_eq!(sanity_check(&m, &zero, 1, 9, 77).unwrap(), 0.0);
    }

    #[test]
    fn spearman_examples() {
        assert_eq!(rank_correlation(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(rank_correlation(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert_eq!(average_ranks(&[1.0, 2.0, 2.0, 3.0]), vec![1.0, 2.5, 2.5, 4.0]);
        assert!(matches!(rank_correlation(&[1.0], &[1.0]), Err(InterpretError::TooFewSamples(1))));
        assert!(matches!(rank_correlation(&[1.0, 1.0], &[1.0, 2.0]), Err(InterpretError::ZeroVariance)));
        assert!(rank_correlation(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn spearman_with_ties_matches_brute_force() {
        // ranks x = [1, 2.5, 2.5, 4], y = [1, 3, 2, 4]
        let rx = [1.0, 2.5, 2.5, 4.0];
        let ry = [1.0, 3.0, 2.0, 4.0];
        let mean = 2.5;
        let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mean) * (b - mean)).sum();
        let vx: f64 = rx.iter().map(|a| (a - mean) * (a - mean)).sum();
        let vy: f64 = ry.iter().map(|b| (b - mean) * (b - mean)).sum();
        let expected = cov / (vx * vy).sqrt();
        let got = rank_correlation(&[1.0, 2.0, 2.0, 3.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.948_683_298).abs() < 1e-9);
    }
}
