//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in execution order, so the tape is topologically sorted
//! by construction and `backward` is a single reverse sweep. Leaf values are
//! held as [`Cow`]s: parameters are borrowed from the model, never copied.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{AutodiffError, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a particular [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: usize, kernel: usize, bias: usize, geom: ConvGeometry },
    ConvTranspose2d { input: usize, kernel: usize, bias: usize, geom: ConvGeometry, output_padding: [usize; 2] },
    MaxPool2d { input: usize, argmax: Vec<u32> },
    Relu { input: usize },
    Softmax { input: usize },
    Dense { input: usize, weight: usize, bias: usize },
    Reshape { input: usize },
    Add { lhs: usize, rhs: usize },
    Sub { lhs: usize, rhs: usize },
    Mul { lhs: usize, rhs: usize },
    Scale { input: usize, factor: T },
    Sum { input: usize },
    Mean { input: usize },
    Select { input: usize, position: usize },
    SoftmaxCrossEntropy { logits: usize, label: usize, probs: Vec<T> },
    Mse { prediction: usize, target: usize },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
}

/// Record of primitive operations and their saved activations.
///
/// A tape is single-threaded; independent tapes over the same borrowed
/// parameters can live on different threads.
pub struct Tape<'a, T: Scalar> {
    id: u64,
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn resolve(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(AutodiffError::Detached { index: v.index });
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Cow<'a, Tensor<T>>, op: Op<T>) -> Var {
        #[cfg(debug_assertions)]
        {
            let inputs_finite = op_inputs(&op).iter().all(|&i| self.nodes[i].value.all_finite());
            debug_assert!(
                !inputs_finite || value.all_finite(),
                "non-finite output from {op:?} on finite inputs"
            );
        }
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Records a tensor the tape does not own.
    pub fn leaf_ref(&mut self, value: &'a Tensor<T>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>, AutodiffError> {
        let i = self.resolve(v)?;
        Ok(&self.nodes[i].value)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize, padding: usize) -> Result<Var, AutodiffError> {
        let (input, kernel, bias) = (self.resolve(input)?, self.resolve(kernel)?, self.resolve(bias)?);
        let geom = ConvGeometry { stride, padding };
        let out = kernels::conv2d(self.val(input), self.val(kernel), self.val(bias), geom)?;
        Ok(self.push(Cow::Owned(out), Op::Conv2d { input, kernel, bias, geom }))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: [usize; 2],
    ) -> Result<Var, AutodiffError> {
        let (input, kernel, bias) = (self.resolve(input)?, self.resolve(kernel)?, self.resolve(bias)?);
        let geom = ConvGeometry { stride, padding };
        let out = kernels::conv_transpose2d(self.val(input), self.val(kernel), self.val(bias), geom, output_padding)?;
        Ok(self.push(
            Cow::Owned(out),
            Op::ConvTranspose2d { input, kernel, bias, geom, output_padding },
        ))
    }

    pub fn maxpool2d(&mut self, input: Var, k: usize, stride: usize) -> Result<Var, AutodiffError> {
        let input = self.resolve(input)?;
        let (out, argmax) = kernels::maxpool2d(self.val(input), k, stride)?;
        Ok(self.push(Cow::Owned(out), Op::MaxPool2d { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let input = self.resolve(input)?;
        let out = relu(self.val(input));
        Ok(self.push(Cow::Owned(out), Op::Relu { input }))
    }

    pub fn softmax(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let input = self.resolve(input)?;
        let x = self.val(input);
        let out = Tensor::new(x.shape().to_vec(), kernels::softmax(x.data()))?;
        Ok(self.push(Cow::Owned(out), Op::Softmax { input }))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (input, weight, bias) = (self.resolve(input)?, self.resolve(weight)?, self.resolve(bias)?);
        let out = kernels::dense(self.val(input), self.val(weight), self.val(bias))?;
        Ok(self.push(Cow::Owned(out), Op::Dense { input, weight, bias }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let input = self.resolve(input)?;
        let out = self.val(input).reshape(shape)?;
        Ok(self.push(Cow::Owned(out), Op::Reshape { input }))
    }

    fn binary(&mut self, lhs: Var, rhs: Var, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>), AutodiffError> {
        let (l, r) = (self.resolve(lhs)?, self.resolve(rhs)?);
        let (a, b) = (self.val(l), self.val(r));
        b.expect_shape(a.shape())?;
        let out = Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )?;
        Ok((l, r, out))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var, AutodiffError> {
        let (lhs, rhs, out) = self.binary(lhs, rhs, |a, b| a + b)?;
        Ok(self.push(Cow::Owned(out), Op::Add { lhs, rhs }))
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var, AutodiffError> {
        let (lhs, rhs, out) = self.binary(lhs, rhs, |a, b| a - b)?;
        Ok(self.push(Cow::Owned(out), Op::Sub { lhs, rhs }))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var, AutodiffError> {
        let (lhs, rhs, out) = self.binary(lhs, rhs, |a, b| a * b)?;
        Ok(self.push(Cow::Owned(out), Op::Mul { lhs, rhs }))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var, AutodiffError> {
        let input = self.resolve(input)?;
        let out = self.val(input).scale(factor);
        Ok(self.push(Cow::Owned(out), Op::Scale { input, factor }))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let input = self.resolve(input)?;
        let out = Tensor::scalar(self.val(input).sum());
        Ok(self.push(Cow::Owned(out), Op::Sum { input }))
    }

    pub fn mean(&mut self, input: Var) -> Result<Var, AutodiffError> {
        let input = self.resolve(input)?;
        let x = self.val(input);
        let out = Tensor::scalar(x.sum() / T::from_f64(x.numel() as f64));
        Ok(self.push(Cow::Owned(out), Op::Mean { input }))
    }

    /// Picks one element (flat row-major position) as a scalar.
    pub fn select(&mut self, input: Var, position: usize) -> Result<Var, AutodiffError> {
        let input = self.resolve(input)?;
        let x = self.val(input);
        let Some(&v) = x.data().get(position) else {
            return Err(TensorError::operands("select", format!("position {position} outside {:?}", x.shape())).into());
        };
        Ok(self.push(Cow::Owned(Tensor::scalar(v)), Op::Select { input, position }))
    }

    /// Cross-entropy of `softmax(logits)` against an integer class label.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, AutodiffError> {
        let logits = self.resolve(logits)?;
        let z = self.val(logits);
        if label >= z.numel() {
            return Err(AutodiffError::LabelOutOfRange { label, classes: z.numel() });
        }
        let probs = kernels::softmax(z.data());
        let max = z.data().iter().copied().fold(T::neg_infinity(), T::max);
        let log_total = z.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = -(z.data()[label] - max - log_total);
        Ok(self.push(Cow::Owned(Tensor::scalar(loss)), Op::SoftmaxCrossEntropy { logits, label, probs }))
    }

    /// Mean squared error between two tensors of identical shape.
    pub fn mse(&mut self, prediction: Var, target: Var) -> Result<Var, AutodiffError> {
        let (prediction, target) = (self.resolve(prediction)?, self.resolve(target)?);
        let (p, t) = (self.val(prediction), self.val(target));
        t.expect_shape(p.shape())?;
        let total: T = p.data().iter().zip(t.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let loss = total / T::from_f64(p.numel() as f64);
        Ok(self.push(Cow::Owned(Tensor::scalar(loss)), Op::Mse { prediction, target }))
    }

    /// Gradients of a scalar output with respect to every node on the tape.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, AutodiffError> {
        let out = self.resolve(output)?;
        let value = self.val(out);
        if !value.is_scalar() {
            return Err(AutodiffError::NotScalar(value.shape().to_vec()));
        }
        self.backward_with_seed(output, Tensor::ones(value.shape()))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`) back
    /// through the tape.
    pub fn backward_with_seed(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>, AutodiffError> {
        let out = self.resolve(output)?;
        seed.expect_shape(self.val(out).shape())?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out] = Some(seed);
        for i in (0..=out).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads: grads
                .into_iter()
                .enumerate()
                .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(self.val(i).shape())))
                .collect(),
        })
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), AutodiffError> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::Conv2d { input, kernel, bias, geom } => {
                let (gx, gk, gb) = kernels::conv2d_backward(g, self.val(input), self.val(kernel), geom)?;
                accumulate(grads, input, gx)?;
                accumulate(grads, kernel, gk)?;
                accumulate(grads, bias, gb)?;
            }
            &Op::ConvTranspose2d { input, kernel, bias, geom, output_padding } => {
                let (gx, gk, gb) =
                    kernels::conv_transpose2d_backward(g, self.val(input), self.val(kernel), geom, output_padding)?;
                accumulate(grads, input, gx)?;
                accumulate(grads, kernel, gk)?;
                accumulate(grads, bias, gb)?;
            }
            Op::MaxPool2d { input, argmax } => {
                let gx = kernels::maxpool2d_backward(g, self.val(*input).shape(), argmax);
                accumulate(grads, *input, gx)?;
            }
            &Op::Relu { input } => {
                let x = self.val(input);
                let gx = Tensor::new(
                    x.shape().to_vec(),
                    x.data()
                        .iter()
                        .zip(g.data())
                        .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                        .collect(),
                )?;
                accumulate(grads, input, gx)?;
            }
            &Op::Softmax { input } => {
                // dz = p * (g - <g, p>)
                let p = self.val(i);
                let dot: T = p.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum();
                let gx = zip_map(p, g, |pv, gv| pv * (gv - dot))?;
                accumulate(grads, input, gx)?;
            }
            &Op::Dense { input, weight, bias } => {
                let (gx, gw, gb) = kernels::dense_backward(g, self.val(input), self.val(weight))?;
                accumulate(grads, input, gx)?;
                accumulate(grads, weight, gw)?;
                accumulate(grads, bias, gb)?;
            }
            &Op::Reshape { input } => {
                let gx = g.reshape(self.val(input).shape())?;
                accumulate(grads, input, gx)?;
            }
            &Op::Add { lhs, rhs } => {
                accumulate(grads, lhs, g.clone())?;
                accumulate(grads, rhs, g.clone())?;
            }
            &Op::Sub { lhs, rhs } => {
                accumulate(grads, lhs, g.clone())?;
                accumulate(grads, rhs, g.map(|v| -v))?;
            }
            &Op::Mul { lhs, rhs } => {
                let (a, b) = (self.val(lhs), self.val(rhs));
                let ga = zip_map(g, b, |gv, bv| gv * bv)?;
                let gb = zip_map(g, a, |gv, av| gv * av)?;
                accumulate(grads, lhs, ga)?;
                accumulate(grads, rhs, gb)?;
            }
            &Op::Scale { input, factor } => {
                accumulate(grads, input, g.scale(factor))?;
            }
            &Op::Sum { input } => {
                let gv = g.data()[0];
                accumulate(grads, input, Tensor::full(self.val(input).shape(), gv))?;
            }
            &Op::Mean { input } => {
                let x = self.val(input);
                let gv = g.data()[0] / T::from_f64(x.numel() as f64);
                accumulate(grads, input, Tensor::full(x.shape(), gv))?;
            }
            &Op::Select { input, position } => {
                let mut gx = Tensor::zeros(self.val(input).shape());
                gx.data_mut()[position] = g.data()[0];
                accumulate(grads, input, gx)?;
            }
            Op::SoftmaxCrossEntropy { logits, label, probs } => {
                let gv = g.data()[0];
                let shape = self.val(*logits).shape().to_vec();
                let gz = Tensor::new(
                    shape,
                    probs
                        .iter()
                        .enumerate()
                        .map(|(k, &p)| gv * if k == *label { p - T::one() } else { p })
                        .collect(),
                )?;
                accumulate(grads, *logits, gz)?;
            }
            &Op::Mse { prediction, target } => {
                let (p, t) = (self.val(prediction), self.val(target));
                let c = g.data()[0] * T::from_f64(2.0 / p.numel() as f64);
                let gp = zip_map(p, t, |a, b| c * (a - b))?;
                let gt = gp.map(|v| -v);
                accumulate(grads, prediction, gp)?;
                accumulate(grads, target, gt)?;
            }
        }
        Ok(())
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d { input, kernel, bias, .. } | Op::ConvTranspose2d { input, kernel, bias, .. } => {
            vec![*input, *kernel, *bias]
        }
        Op::Dense { input, weight, bias } => vec![*input, *weight, *bias],
        Op::MaxPool2d { input, .. }
        | Op::Relu { input }
        | Op::Softmax { input }
        | Op::Reshape { input }
        | Op::Scale { input, .. }
        | Op::Sum { input }
        | Op::Mean { input }
        | Op::Select { input, .. } => vec![*input],
        Op::Add { lhs, rhs } | Op::Sub { lhs, rhs } | Op::Mul { lhs, rhs } => vec![*lhs, *rhs],
        Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        Op::Mse { prediction, target } => vec![*prediction, *target],
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], at: usize, g: Tensor<T>) -> Result<(), TensorError> {
    match &mut grads[at] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, TensorError> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradients for one backward sweep, indexed by the [`Var`]s of the tape
/// they came from. Nodes the output does not depend on get zero gradients.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar> {
    tape: u64,
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Result<&Tensor<T>, AutodiffError> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(AutodiffError::Detached { index: v.index });
        }
        Ok(&self.grads[v.index])
    }

    pub fn take(&mut self, v: Var) -> Result<Tensor<T>, AutodiffError> {
        let shape = self.get(v)?.shape().to_vec();
        Ok(std::mem::replace(&mut self.grads[v.index], Tensor::zeros(&shape)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
    }

    #[test]
    fn sum_of_feature_map_has_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(Tensor::from_fn(&[2, 3, 3], |i| i as f64 - 4.0));
        let y = tape.sum(f).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(f).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_slice(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        for k in [2usize, 5, 10] {
            for label in [0, k - 1] {
                let mut tape = Tape::<f64>::new();
                let z = tape.leaf(Tensor::full(&[k], 0.7));
                let loss = tape.softmax_cross_entropy(z, label).unwrap();
                let v = tape.value(loss).unwrap().item().unwrap();
                assert!((v - (k as f64).ln()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::from_fn(&[4, 2], |i| i as f32));
        let y = tape.leaf(Tensor::from_fn(&[4, 2], |i| i as f32));
        let l = tape.mse(x, y).unwrap();
        assert_eq!(tape.value(l).unwrap().item(), Some(0.0));
    }

    #[test]
    fn label_out_of_range_is_an_error() {
        let mut tape = Tape::<f32>::new();
        let z = tape.leaf(Tensor::zeros(&[3]));
        assert_eq!(
            tape.softmax_cross_entropy(z, 3).unwrap_err(),
            AutodiffError::LabelOutOfRange { label: 3, classes: 3 }
        );
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NotScalar(_))));
    }

    #[test]
    fn foreign_var_is_detached() {
        let mut a = Tape::<f32>::new();
        let mut b = Tape::<f32>::new();
        let xa = a.leaf(Tensor::scalar(1.0));
        let xb = b.leaf(Tensor::scalar(1.0));
        let g = a.backward(xa).unwrap();
        assert!(matches!(g.get(xb), Err(AutodiffError::Detached { .. })));
        assert!(matches!(a.relu(xb), Err(AutodiffError::Detached { .. })));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let unused = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.scale(x, 4.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(4.0));
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + 3x  ->  dy/dx = 2x + 3
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(1.5));
        let sq = tape.mul(x, x).unwrap();
        let lin = tape.scale(x, 3.0).unwrap();
        let y = tape.add(sq, lin).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(6.0));
    }
}
