//! First-order optimizers over lists of parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moments plus the shared step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    moments: Vec<(Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn first_moment(&self, param: usize) -> Option<&Tensor<T>> {
        self.moments.get(param).map(|(m, _)| m)
    }

    pub fn second_moment(&self, param: usize) -> Option<&Tensor<T>> {
        self.moments.get(param).map(|(_, v)| v)
    }
}

fn check_shapes<T: Scalar>(params: &[&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<(), TensorError> {
    if params.len() != grads.len() {
        return Err(TensorError::operands(
            "optimizer",
            format!("{} parameters but {} gradients", params.len(), grads.len()),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        g.expect_shape(p.shape())?;
    }
    Ok(())
}

/// One bias-corrected Adam update. Moments are created lazily on the first call.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) -> Result<(), TensorError> {
    check_shapes(params, grads)?;
    if state.moments.is_empty() {
        state.moments = params
            .iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .collect();
    } else if state.moments.len() != params.len() {
        return Err(TensorError::operands(
            "adam",
            format!("state tracks {} parameters, got {}", state.moments.len(), params.len()),
        ));
    }
    for ((p, _), (m, _)) in params.iter().zip(grads).zip(&state.moments) {
        m.expect_shape(p.shape())?;
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let lr = T::from_f64(cfg.lr);
    let eps = T::from_f64(cfg.eps);
    let c1 = one - b1.powi(t);
    let c2 = one - b2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.moments.iter_mut()) {
        let pd = p.data_mut();
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (i, &gi) in g.data().iter().enumerate() {
            md[i] = b1 * md[i] + (one - b1) * gi;
            vd[i] = b2 * vd[i] + (one - b2) * gi * gi;
            let m_hat = md[i] / c1;
            let v_hat = vd[i] / c2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn sgd_step<T: Scalar>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<(), TensorError> {
    check_shapes(params, grads)?;
    let lr = T::from_f64(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        for (pi, &gi) in p.data_mut().iter_mut().zip(g.data()) {
            *pi -= lr * gi;
        }
    }
    Ok(())
}

/// Optimizer selection shared by every training phase.
#[derive(Debug, Clone)]
pub enum Optimizer<T: Scalar> {
    Adam { cfg: AdamConfig, state: AdamState<T> },
    Sgd { lr: f64 },
}

impl<T: Scalar> Optimizer<T> {
    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            cfg: AdamConfig::with_lr(lr),
            state: AdamState::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<(), TensorError> {
        match self {
            Optimizer::Adam { cfg, state } => adam_step(params, grads, state, cfg),
            Optimizer::Sgd { lr } => sgd_step(params, grads, *lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_counts_step() {
        let mut p = Tensor::<f64>::from_slice(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut state = AdamState::new();
        let grads = vec![Tensor::zeros(&[3])];
        adam_step(&mut [&mut p], &grads, &mut state, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn single_step_matches_hand_expansion() {
        // Step 1: m = (1-b1) g, v = (1-b2) g^2, m_hat = g, v_hat = g^2,
        // update = lr * g / (|g| + eps).
        let (x0, g, lr) = (0.75f64, -0.3f64, 5e-3);
        let cfg = AdamConfig::with_lr(lr);
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1);
        let v_hat = v / (1.0 - cfg.beta2);
        let expected = x0 - lr * m_hat / (v_hat.sqrt() + cfg.eps);

        let mut p = Tensor::scalar(x0);
        let mut state = AdamState::new();
        adam_step(&mut [&mut p], &[Tensor::scalar(g)], &mut state, &cfg).unwrap();
        let got = p.item().unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
        assert!((got - (x0 + lr)).abs() < 1e-9);
        assert!((state.first_moment(0).unwrap().item().unwrap() - m).abs() < 1e-18);
        assert!((state.second_moment(0).unwrap().item().unwrap() - v).abs() < 1e-18);
    }

    #[test]
    fn defaults_are_canonical() {
        let cfg = AdamConfig::default();
        assert_eq!((cfg.beta1, cfg.beta2, cfg.eps), (0.9, 0.999, 1e-8));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let err = sgd_step(&mut [&mut p], &[Tensor::zeros(&[3])], 0.1).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
        let mut state = AdamState::new();
        assert!(adam_step(&mut [&mut p], &[], &mut state, &AdamConfig::default()).is_err());
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = Tensor::<f64>::from_slice(&[2], &[1.0, 1.0]).unwrap();
        sgd_step(&mut [&mut p], &[Tensor::from_slice(&[2], &[2.0, -4.0]).unwrap()], 0.25).unwrap();
        assert_eq!(p.data(), &[0.5, 2.0]);
    }
}
