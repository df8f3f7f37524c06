//! Minibatch training loops and evaluation.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::error::AutodiffError;
use crate::model::{Model, ModelError};
use crate::optim::Optimizer;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training samples")]
    Empty,
    #[error("{0} images but {1} labels")]
    LengthMismatch(usize, usize),
    #[error("finetune requested before the autoencoder phase ran; pass the override to force it")]
    PhaseOrder,
    #[error("bottleneck built for layer {spec_layer} with input {spec_shape:?}, but that layer outputs {actual:?}")]
    SpecMismatch {
        spec_layer: usize,
        spec_shape: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

impl From<crate::error::TensorError> for TrainError {
    fn from(e: crate::error::TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Training the unsplit classifier.
    Base,
    /// Bottleneck only, reconstruction loss, rest of the network frozen.
    Ae,
    /// End to end through the bottleneck.
    Finetune,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Base => "base",
            Phase::Ae => "ae",
            Phase::Finetune => "finetune",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Squared reconstruction error summed over elements.
    MseRecon,
    CrossEntropy,
    /// Mean squared error between the logits and the one-hot label.
    MseOnehot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub loss: LossKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn base() -> Self {
        Self {
            phase: Phase::Base,
            epochs: 20,
            lr: 2e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 32,
            loss: LossKind::CrossEntropy,
            seed: 0,
        }
    }

    pub fn ae() -> Self {
        Self {
            phase: Phase::Ae,
            epochs: 200,
            lr: 5e-3,
            loss: LossKind::MseRecon,
            ..Self::base()
        }
    }

    pub fn finetune() -> Self {
        Self {
            phase: Phase::Finetune,
            epochs: 100,
            lr: 1e-4,
            ..Self::base()
        }
    }

    pub fn with_epochs(self, epochs: usize) -> Self {
        Self { epochs, ..self }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        Self { lr, ..self }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    /// Checks a user-supplied config. The training functions themselves also
    /// accept `epochs == 0` and `lr == 0` as no-op runs.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.epochs == 0 {
            return Err(TrainError::Config(format!("{} phase: epochs must be at least 1", self.phase)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("{} phase: lr must be positive, got {}", self.phase, self.lr)));
        }
        self.check_runnable()
    }

    fn check_runnable(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config(format!("{} phase: batch_size must be at least 1", self.phase)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("{} phase: lr must be non-negative", self.phase)));
        }
        let reconstruction = self.phase == Phase::Ae;
        if reconstruction != (self.loss == LossKind::MseRecon) {
            return Err(TrainError::Config(format!(
                "{} phase cannot use loss {:?}",
                self.phase, self.loss
            )));
        }
        Ok(())
    }

    fn optimizer(&self) -> Optimizer<f32> {
        match self.optimizer {
            OptimizerKind::Adam => Optimizer::adam(self.lr),
            OptimizerKind::Sgd => Optimizer::Sgd { lr: self.lr },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean per-sample loss over the epoch, measured before each update.
    pub loss: f64,
    /// Training accuracy over the epoch for classification losses.
    pub accuracy: Option<f64>,
}

pub type History = Vec<EpochStats>;

/// Sample order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
}

/// Per-sample loss: receives the tape, the model output and the sample index,
/// returns the scalar loss and whether the sample was classified correctly.
pub trait Objective: Sync {
    fn loss<'a>(&self, tape: &mut Tape<'a, f32>, output: Var, sample: usize) -> Result<(Var, Option<bool>), TrainError>;
}

pub struct Classification<'d> {
    pub labels: &'d [usize],
    pub loss: LossKind,
}

impl Objective for Classification<'_> {
    fn loss<'a>(&self, tape: &mut Tape<'a, f32>, output: Var, sample: usize) -> Result<(Var, Option<bool>), TrainError> {
        let label = self.labels[sample];
        let logits = tape.value(output)?;
        let correct = logits.argmax() == label;
        let classes = logits.numel();
        let loss = match self.loss {
            LossKind::CrossEntropy => tape.softmax_cross_entropy(output, label)?,
            LossKind::MseOnehot => {
                if label >= classes {
                    return Err(AutodiffError::LabelOutOfRange { label, classes }.into());
                }
                let target = tape.leaf(Tensor::from_fn(&[classes], |k| if k == label { 1.0 } else { 0.0 }));
                tape.mse(output, target)?
            }
            LossKind::MseRecon => return Err(TrainError::Config("reconstruction loss on a classifier".into())),
        };
        Ok((loss, Some(correct)))
    }
}

/// `||x - model(x)||^2`, summed over elements.
pub struct Reconstruction<'d> {
    pub targets: &'d [Tensor<f32>],
}

impl Objective for Reconstruction<'_> {
    fn loss<'a>(&self, tape: &mut Tape<'a, f32>, output: Var, sample: usize) -> Result<(Var, Option<bool>), TrainError> {
        let target = tape.leaf(self.targets[sample].clone());
        let n = self.targets[sample].numel() as f32;
        let mean = tape.mse(output, target)?;
        Ok((tape.scale(mean, n)?, None))
    }
}

struct SampleResult {
    loss: f64,
    correct: Option<bool>,
    grads: Vec<Tensor<f32>>,
}

fn sample_grads(model: &Model<f32>, input: &Tensor<f32>, sample: usize, objective: &dyn Objective) -> Result<SampleResult, TrainError> {
    let mut tape = Tape::new();
    let x = tape.leaf_ref(input);
    let rec = model.record(&mut tape, x)?;
    let (loss, correct) = objective.loss(&mut tape, rec.output, sample)?;
    let value = tape.value(loss)?.data()[0] as f64;
    let mut g = tape.backward(loss)?;
    let grads = rec.param_vars().map(|v| g.take(v)).collect::<Result<_, _>>()?;
    Ok(SampleResult {
        loss: value,
        correct,
        grads,
    })
}

/// Minibatch gradient descent over every parameter of `model`.
///
/// Per-sample gradients within a batch are computed in parallel and summed in
/// sample order, so results do not depend on the thread count.
pub fn fit(model: &mut Model<f32>, inputs: &[Tensor<f32>], objective: &dyn Objective, cfg: &TrainConfig) -> Result<History, TrainError> {
    cfg.check_runnable()?;
    if inputs.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut opt = cfg.optimizer();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = epoch_order(inputs.len(), cfg.seed, epoch);
        let (mut loss_sum, mut correct, mut scored) = (0.0, 0usize, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let results = {
                let m: &Model<f32> = model;
                batch
                    .par_iter()
                    .map(|&i| sample_grads(m, &inputs[i], i, objective))
                    .collect::<Result<Vec<_>, _>>()?
            };
            let mut total: Vec<Tensor<f32>> = Vec::new();
            for r in results {
                loss_sum += r.loss;
                if let Some(c) = r.correct {
                    scored += 1;
                    correct += c as usize;
                }
                if total.is_empty() {
                    total = r.grads;
                } else {
                    for (t, g) in total.iter_mut().zip(&r.grads) {
                        t.add_assign(g)?;
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            let grads: Vec<Tensor<f32>> = total.iter().map(|t| t.scale(inv)).collect();
            if cfg.lr > 0.0 {
                opt.step(&mut model.params_mut(), &grads)?;
            }
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / inputs.len() as f64,
            accuracy: (scored > 0).then(|| correct as f64 / scored as f64),
        };
        log::debug!("{} epoch {}: loss {:.5} acc {:?}", cfg.phase, stats.epoch, stats.loss, stats.accuracy);
        history.push(stats);
    }
    Ok(history)
}

pub fn train_classifier(
    model: &mut Model<f32>,
    images: &[Tensor<f32>],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<History, TrainError> {
    if images.len() != labels.len() {
        return Err(TrainError::LengthMismatch(images.len(), labels.len()));
    }
    fit(model, images, &Classification { labels, loss: cfg.loss }, cfg)
}

pub fn predictions(model: &Model<f32>, images: &[Tensor<f32>]) -> Result<Vec<usize>, ModelError> {
    images.par_iter().map(|x| model.predict(x)).collect()
}

/// Fraction of `images` whose argmax logit equals the label.
pub fn accuracy(model: &Model<f32>, images: &[Tensor<f32>], labels: &[usize]) -> Result<f64, ModelError> {
    accuracy_with(|x| model.predict(x), images, labels)
}

pub fn accuracy_with(
    predict: impl Fn(&Tensor<f32>) -> Result<usize, ModelError> + Sync,
    images: &[Tensor<f32>],
    labels: &[usize],
) -> Result<f64, ModelError> {
    if images.is_empty() {
        return Ok(0.0);
    }
    let preds: Vec<usize> = images.par_iter().map(&predict).collect::<Result<_, _>>()?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / images.len() as f64)
}
