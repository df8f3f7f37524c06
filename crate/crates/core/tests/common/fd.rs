//! Central finite differences against the tape.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use isplit::autodiff::{Tape, Var};
use isplit::kernels;
use isplit::model::{build_model, Architecture, LayerKind, Model};
use isplit::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Coordinates checked per tensor when it is larger than this.
pub const SAMPLED: usize = 40;
/// Denominator floor so that an all-zero gradient is compared absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Values at least 0.05 apart and away from zero, in random order, so
/// that neither max-pool winners nor ReLU signs flip under the step.
pub fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_fn(shape, |i| {
        let v = (order[i] as f64 - n as f64 / 2.0) * 0.05;
        if v >= 0.0 {
            v + 0.025
        } else {
            v - 0.025
        }
    })
}

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(FLOOR)
}

pub fn coords(rng: &mut ChaCha8Rng, numel: usize) -> Vec<usize> {
    if numel <= SAMPLED {
        (0..numel).collect()
    } else {
        let mut c = sample(rng, numel, SAMPLED).into_vec();
        c.sort_unstable();
        c
    }
}

/// Reduces a non-scalar output to a scalar with fixed random weights.
pub fn scalarize(tape: &mut Tape<'_, f64>, y: Var, weights: &Tensor<f64>) -> Var {
    if tape.value(y).unwrap().is_scalar() {
        return y;
    }
    let w = tape.leaf(weights.clone());
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

/// Worst relative error over every input of `f`.
pub fn check_op(seed: u64, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let eval = |xs: &[Tensor<f64>], weights: Option<&Tensor<f64>>| -> (f64, Tensor<f64>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let y = f(&mut tape, &vars);
        let shape = tape.value(y).unwrap().shape().to_vec();
        let w = weights.cloned().unwrap_or_else(|| Tensor::from_fn(&shape, |i| 0.5 + (i % 7) as f64 * 0.25));
        let s = scalarize(&mut tape, y, &w);
        (tape.value(s).unwrap().item().unwrap(), w)
    };
    let (_, weights) = eval(&inputs, None);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let y = f(&mut tape, &vars);
    let s = scalarize(&mut tape, y, &weights);
    let grads = tape.backward(s).unwrap();

    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).unwrap();
        let picked = coords(&mut rng, x.numel());
        let mut numeric = Vec::with_capacity(picked.len());
        for &j in &picked {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= STEP;
            numeric.push((eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * STEP));
        }
        let a: Vec<f64> = picked.iter().map(|&j| analytic.data()[j]).collect();
        worst = worst.max(rel_error(&a, &numeric));
    }
    worst
}

pub type Perturbed = (Model<f64>, Tensor<f64>);

pub fn micro(seed: u64) -> Model<f64> {
    build_model(&Architecture::preset("vgg-micro").unwrap(), &[1, 16, 16], 8, seed).unwrap()
}

pub fn model_loss(model: &Model<f64>, image: &Tensor<f64>, label: usize) -> f64 {
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    let rec = model.record(&mut tape, x).unwrap();
    let loss = tape.softmax_cross_entropy(rec.output, label).unwrap();
    tape.value(loss).unwrap().item().unwrap()
}

/// Which ReLUs are active and which element wins every max-pool window.
/// The loss is smooth between two points with the same pattern.
pub fn pattern(model: &Model<f64>, image: &Tensor<f64>) -> Vec<u32> {
    let outs = model.forward_all(image).unwrap();
    let mut bits = Vec::new();
    for (i, layer) in model.layers().iter().enumerate() {
        let input = if i == 0 { image } else { &outs[i - 1] };
        match layer.kind {
            LayerKind::Relu => bits.extend(input.data().iter().map(|&v| u32::from(v > 0.0))),
            LayerKind::MaxPool { kernel, stride } => bits.extend(kernels::maxpool2d(input, kernel, stride).unwrap().1),
            _ => {}
        }
    }
    bits
}

/// Worst relative error over the input and every parameter tensor, and the
/// fraction of coordinates skipped for straddling a kink.
pub fn check_model(model: &Model<f64>, image: &Tensor<f64>, label: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3c);
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    let rec = model.record(&mut tape, x).unwrap();
    let loss = tape.softmax_cross_entropy(rec.output, label).unwrap();
    let grads = tape.backward(loss).unwrap();

    let (mut worst, mut skipped, mut total) = (0.0f64, 0usize, 0usize);
    let mut compare = |analytic: &Tensor<f64>, picked: Vec<usize>, perturb: &dyn Fn(usize, f64) -> Perturbed| {
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for j in picked {
            total += 1;
            let ((mp, xp), (mm, xm)) = (perturb(j, STEP), perturb(j, -STEP));
            if pattern(&mp, &xp) != pattern(&mm, &xm) {
                skipped += 1;
                continue;
            }
            a.push(analytic.data()[j]);
            n.push((model_loss(&mp, &xp, label) - model_loss(&mm, &xm, label)) / (2.0 * STEP));
        }
        assert!(!a.is_empty(), "every coordinate of a {:?} tensor straddles a kink", analytic.shape());
        worst = worst.max(rel_error(&a, &n));
    };

    let picked = coords(&mut rng, image.numel());
    compare(grads.get(x).unwrap(), picked, &|j, h| {
        let mut p = image.clone();
        p.data_mut()[j] += h;
        (model.clone(), p)
    });

    let vars: Vec<Var> = rec.param_vars().collect();
    assert_eq!(vars.len(), model.params().len());
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap();
        assert_eq!(analytic.shape(), model.params()[k].shape());
        let picked = coords(&mut rng, analytic.numel());
        compare(analytic, picked, &|j, h| {
            let mut p = model.clone();
            p.params_mut()[k].data_mut()[j] += h;
            (p, image.clone())
        });
    }
    (worst, skipped as f64 / total as f64)
}
