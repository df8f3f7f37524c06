//! Accuracy resampling and per-class F1 comparison.

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interpret::rank_correlation;
use crate::model::{Model, ModelError, SplitPlan};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_TRIALS: usize = 15;
pub const DEFAULT_SAMPLE_SIZE: usize = 800;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("no samples to draw from")]
    Empty,
    #[error("sample size {sample} exceeds the {available} available samples")]
    SampleTooLarge { sample: usize, available: usize },
    #[error("trials must be at least 1")]
    NoTrials,
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("label {label} outside {class_count} classes")]
    LabelOutOfRange { label: usize, class_count: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Anything that maps an image to a class id.
pub trait Classifier<T: Scalar> {
    fn classify(&self, x: &Tensor<T>) -> Result<usize, ModelError>;
}

impl<T: Scalar> Classifier<T> for Model<T> {
    fn classify(&self, x: &Tensor<T>) -> Result<usize, ModelError> {
        self.predict(x)
    }
}

impl<T: Scalar> Classifier<T> for SplitPlan<T> {
    fn classify(&self, x: &Tensor<T>) -> Result<usize, ModelError> {
        self.predict(x)
    }
}

pub fn classify_all<T: Scalar>(model: &impl Classifier<T>, images: &[Tensor<T>]) -> Result<Vec<usize>, StatsError> {
    Ok(images.iter().map(|x| model.classify(x)).collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleStats {
    pub sample_size: usize,
    pub trials: usize,
    pub seed: u64,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub accuracies: Vec<f64>,
}

impl ResampleStats {
    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Quantile with linear interpolation between closest ranks; `sorted` must be ascending.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of nothing");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Accuracy over `trials` subsets of `sample_size` items, each drawn without
/// replacement from `correct`. `sample_size` defaults to `min(800, len)`.
pub fn resample_accuracy(
    correct: &[bool],
    sample_size: Option<usize>,
    trials: usize,
    seed: u64,
) -> Result<ResampleStats, StatsError> {
    let n = correct.len();
    if n == 0 {
        return Err(StatsError::Empty);
    }
    if trials == 0 {
        return Err(StatsError::NoTrials);
    }
    let k = sample_size.unwrap_or(DEFAULT_SAMPLE_SIZE.min(n));
    if k == 0 {
        return Err(StatsError::Empty);
    }
    if k > n {
        return Err(StatsError::SampleTooLarge { sample: k, available: n });
    }
    let accuracies: Vec<f64> = (0..trials)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64 + 1);
            let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx.iter().filter(|&&i| correct[i]).count() as f64 / k as f64
        })
        .collect();
    let mut sorted = accuracies.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(ResampleStats {
        sample_size: k,
        trials,
        seed,
        mean: accuracies.iter().sum::<f64>() / trials as f64,
        min: sorted[0],
        q1: quantile(&sorted, 0.25),
        median: quantile(&sorted, 0.5),
        q3: quantile(&sorted, 0.75),
        max: sorted[trials - 1],
        accuracies,
    })
}

/// Resampled accuracy of `model` on a labelled set.
pub fn stats_resample<T: Scalar>(
    model: &impl Classifier<T>,
    images: &[Tensor<T>],
    labels: &[usize],
    sample_size: Option<usize>,
    trials: usize,
    seed: u64,
) -> Result<ResampleStats, StatsError> {
    if images.len() != labels.len() {
        return Err(StatsError::LengthMismatch {
            predictions: images.len(),
            labels: labels.len(),
        });
    }
    let preds = classify_all(model, images)?;
    let correct: Vec<bool> = preds.iter().zip(labels).map(|(p, l)| p == l).collect();
    resample_accuracy(&correct, sample_size, trials, seed)
}

/// F1 per class; `None` for classes with no samples in `labels`.
pub fn per_class_f1(predictions: &[usize], labels: &[usize], class_count: usize) -> Result<Vec<Option<f64>>, StatsError> {
    if predictions.len() != labels.len() {
        return Err(StatsError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    let mut tp = vec![0usize; class_count];
    let mut fp = vec![0usize; class_count];
    let mut fnc = vec![0usize; class_count];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= class_count {
            return Err(StatsError::LabelOutOfRange { label: l, class_count });
        }
        if p == l {
            tp[l] += 1;
        } else {
            fnc[l] += 1;
            if p < class_count {
                fp[p] += 1;
            }
        }
    }
    Ok((0..class_count)
        .map(|c| {
            if tp[c] + fnc[c] == 0 {
                None
            } else {
                Some(2.0 * tp[c] as f64 / (2 * tp[c] + fp[c] + fnc[c]) as f64)
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Row {
    pub rank: usize,
    pub class: usize,
    pub support: usize,
    pub f1_before: Option<f64>,
    pub f1_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub rows: Vec<F1Row>,
    /// Spearman rho between the columns over classes present in the test set.
    pub rank_correlation: Option<f64>,
    pub absent_classes: Vec<usize>,
}

/// Per-class F1 before and after splitting, ranked by descending pre-split F1
/// (ties by class id). Absent classes go last with empty cells.
pub fn per_class_f1_report(
    before: &[usize],
    after: &[usize],
    labels: &[usize],
    class_count: usize,
) -> Result<F1Report, StatsError> {
    let f1_before = per_class_f1(before, labels, class_count)?;
    let f1_after = per_class_f1(after, labels, class_count)?;
    let mut support = vec![0usize; class_count];
    for &l in labels {
        support[l] += 1;
    }
    let mut order: Vec<usize> = (0..class_count).collect();
    order.sort_by(|&a, &b| match (f1_before[a], f1_before[b]) {
        (Some(x), Some(y)) => y.total_cmp(&x).then(a.cmp(&b)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(&b),
    });
    let absent: Vec<usize> = (0..class_count).filter(|&c| support[c] == 0).collect();
    if !absent.is_empty() {
        warn!("F1 undefined for classes absent from the test set: {absent:?}");
    }
    let rows = order
        .iter()
        .enumerate()
        .map(|(rank, &c)| F1Row {
            rank: rank + 1,
            class: c,
            support: support[c],
            f1_before: f1_before[c],
            f1_after: f1_after[c],
        })
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = f1_before
        .iter()
        .zip(&f1_after)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .unzip();
    Ok(F1Report {
        rows,
        rank_correlation: rank_correlation(&xs, &ys).ok(),
        absent_classes: absent,
    })
}
