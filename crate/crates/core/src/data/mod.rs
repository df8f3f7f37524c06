//! Labelled image collections, IDX ingestion and the synthetic generator.

pub mod idx;
pub mod synth;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub use idx::{load_idx, load_idx_images, write_idx};
pub use synth::{synth_dataset, Profile};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: bad IDX magic {actual:#010x}, expected {expected:#010x}")]
    Magic { path: String, expected: u32, actual: u32 },
    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated { path: String, expected: usize, actual: usize },
    #[error("image file holds {images} items but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("dataset is empty")]
    Empty,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("images have differing shapes: {first:?} vs {other:?}")]
    ShapeMismatch { first: Vec<usize>, other: Vec<usize> },
    #[error("invalid dataset parameter: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub id: String,
    pub images: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub tags: Vec<SplitTag>,
}

impl Dataset {
    /// Every sample tagged `Train`.
    pub fn new(id: impl Into<String>, images: Vec<Tensor<f32>>, labels: Vec<usize>, class_count: usize) -> Result<Self, DataError> {
        if images.len() != labels.len() {
            return Err(DataError::CountMismatch {
                images: images.len(),
                labels: labels.len(),
            });
        }
        if images.is_empty() {
            return Err(DataError::Empty);
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(DataError::LabelOutOfRange { label, classes: class_count });
        }
        if let Some(other) = images.iter().find(|i| i.shape() != images[0].shape()) {
            return Err(DataError::ShapeMismatch {
                first: images[0].shape().to_vec(),
                other: other.shape().to_vec(),
            });
        }
        let tags = vec![SplitTag::Train; images.len()];
        Ok(Self {
            id: id.into(),
            images,
            labels,
            class_count,
            tags,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        self.images[0].shape()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn select(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Dataset {
            id: self.id.clone(),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
            tags: idx.iter().map(|&i| self.tags[i]).collect(),
        }
    }

    /// Samples carrying `tag`; may be empty.
    pub fn subset(&self, tag: SplitTag) -> Dataset {
        self.select(|i| self.tags[i] == tag)
    }

    /// Samples whose label is in `classes`; labels are kept as they are.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        self.select(|i| classes.contains(&self.labels[i]))
    }

    /// First `n` samples of each class, in dataset order.
    pub fn take_per_class(&self, n: usize) -> Dataset {
        let mut seen = vec![0; self.class_count];
        let keep: Vec<bool> = self
            .labels
            .iter()
            .map(|&l| {
                seen[l] += 1;
                seen[l] <= n
            })
            .collect();
        self.select(|i| keep[i])
    }

    /// Stratified, seeded assignment of train/val/test tags. Each class is
    /// shuffled independently and cut by the given fractions.
    pub fn with_split(mut self, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<Self, DataError> {
        if !(0.0..1.0).contains(&val_fraction) || !(0.0..1.0).contains(&test_fraction) || val_fraction + test_fraction >= 1.0 {
            return Err(DataError::Invalid(format!(
                "split fractions val={val_fraction} test={test_fraction} must be in [0,1) and sum below 1"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for class in 0..self.class_count {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == class).collect();
            members.shuffle(&mut rng);
            let n = members.len() as f64;
            let n_val = (n * val_fraction).round() as usize;
            let n_test = (n * test_fraction).round() as usize;
            for (pos, &i) in members.iter().enumerate() {
                self.tags[i] = if pos < n_val {
                    SplitTag::Val
                } else if pos < n_val + n_test {
                    SplitTag::Test
                } else {
                    SplitTag::Train
                };
            }
        }
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = (0..12).map(|i| Tensor::full(&[1, 2, 2], i as f32)).collect();
        let labels = (0..12).map(|i| i % 3).collect();
        Dataset::new("tiny", images, labels, 3).unwrap()
    }

    #[test]
    fn stratified_split_is_disjoint_and_balanced() {
        let d = tiny().with_split(0.25, 0.25, 5).unwrap();
        let (tr, va, te) = (d.subset(SplitTag::Train), d.subset(SplitTag::Val), d.subset(SplitTag::Test));
        assert_eq!(tr.len() + va.len() + te.len(), d.len());
        assert_eq!(va.class_counts(), vec![1, 1, 1]);
        assert_eq!(te.class_counts(), vec![1, 1, 1]);
        assert_eq!(d.clone().tags, tiny().with_split(0.25, 0.25, 5).unwrap().tags);
    }

    #[test]
    fn construction_errors() {
        let img = || Tensor::zeros(&[1, 2, 2]);
        assert!(matches!(Dataset::new("x", vec![], vec![], 2), Err(DataError::Empty)));
        assert!(matches!(Dataset::new("x", vec![img()], vec![], 2), Err(DataError::CountMismatch { .. })));
        assert!(matches!(Dataset::new("x", vec![img()], vec![2], 2), Err(DataError::LabelOutOfRange { .. })));
        assert!(matches!(
            Dataset::new("x", vec![img(), Tensor::zeros(&[1, 3, 3])], vec![0, 1], 2),
            Err(DataError::ShapeMismatch { .. })
        ));
        assert!(tiny().with_split(0.6, 0.5, 0).is_err());
    }

    #[test]
    fn class_filters() {
        let d = tiny();
        assert_eq!(d.filter_classes(&[1]).labels, vec![1; 4]);
        assert_eq!(d.take_per_class(2).class_counts(), vec![2, 2, 2]);
    }
}
