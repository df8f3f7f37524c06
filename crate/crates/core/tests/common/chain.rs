//! A three-layer toy net and its chain rule written out by hand.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use isplit::model::{build_model, Architecture, Model, ParamRole};

pub const C1: usize = 2;
pub const C2: usize = 3;
pub const HW: usize = 4;
pub const CLASSES: usize = 3;

/// `conv 2 (fused relu) -> conv 3 -> flatten -> dense 3`, all on 4x4 maps.
pub fn toy(seed: u64) -> Model<f64> {
    let mut m: Model<f64> = build_model(&Architecture::parse("conv 2 relu; conv 3; flatten; dense C").unwrap(), &[1, HW, HW], CLASSES, seed).unwrap();
    // non-zero biases so they take part in the oracle
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params_mut() {
        if p.rank() == 1 {
            p.data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
    }
    m
}

pub struct Weights {
    pub k1: Vec<f64>,
    pub b1: Vec<f64>,
    pub k2: Vec<f64>,
    pub b2: Vec<f64>,
    pub wd: Vec<f64>,
}

pub fn weights(m: &Model<f64>) -> Weights {
    let get = |i, r| m.param(i, r).unwrap().data().to_vec();
    Weights {
        k1: get(0, ParamRole::Weight),
        b1: get(0, ParamRole::Bias),
        k2: get(1, ParamRole::Weight),
        b2: get(1, ParamRole::Bias),
        wd: get(3, ParamRole::Weight),
    }
}

/// `[o][y][x]` of a 3x3, stride 1, padding 1 convolution, written out.
pub fn conv3x3(input: &[f64], c_in: usize, kernel: &[f64], bias: &[f64], c_out: usize) -> Vec<f64> {
    let mut out = vec![0.0; c_out * HW * HW];
    for o in 0..c_out {
        for y in 0..HW {
            for x in 0..HW {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (iy, ix) = (y as isize + dy as isize - 1, x as isize + dx as isize - 1);
                            if (0..HW as isize).contains(&iy) && (0..HW as isize).contains(&ix) {
                                acc += kernel[((o * c_in + c) * 3 + dy) * 3 + dx]
                                    * input[(c * HW + iy as usize) * HW + ix as usize];
                            }
                        }
                    }
                }
                out[(o * HW + y) * HW + x] = acc;
            }
        }
    }
    out
}

pub struct Oracle {
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    /// d y^c / d F2: row `c` of the dense weight.
    pub g2: Vec<f64>,
    /// d y^c / d F1 through conv 2.
    pub g1: Vec<f64>,
}

pub fn oracle(w: &Weights, image: &[f64], class: usize) -> Oracle {
    let f1: Vec<f64> = conv3x3(image, 1, &w.k1, &w.b1, C1).into_iter().map(|v| v.max(0.0)).collect();
    let f2 = conv3x3(&f1, C1, &w.k2, &w.b2, C2);
    let n2 = C2 * HW * HW;
    let g2 = w.wd[class * n2..(class + 1) * n2].to_vec();
    // dy/dF1[c][p][q] = sum_o sum_{y,x} g2[o][y][x] * k2[o][c][p-y+1][q-x+1]
    let mut g1 = vec![0.0; C1 * HW * HW];
    for c in 0..C1 {
        for p in 0..HW {
            for q in 0..HW {
                let mut acc = 0.0;
                for o in 0..C2 {
                    for y in 0..HW {
                        for x in 0..HW {
                            let (dy, dx) = (p as isize - y as isize + 1, q as isize - x as isize + 1);
                            if (0..3).contains(&dy) && (0..3).contains(&dx) {
                                acc += g2[(o * HW + y) * HW + x] * w.k2[((o * C1 + c) * 3 + dy as usize) * 3 + dx as usize];
                            }
                        }
                    }
                }
                g1[(c * HW + p) * HW + q] = acc;
            }
        }
    }
    Oracle { f1, f2, g2, g1 }
}

pub fn reference_map(features: &[f64], grads: &[f64], channels: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = HW * HW;
    let alpha: Vec<f64> = (0..channels).map(|k| grads[k * plane..(k + 1) * plane].iter().sum::<f64>() / plane as f64).collect();
    let map = (0..plane)
        .map(|s| (0..channels).map(|k| alpha[k] * features[k * plane + s]).sum::<f64>().max(0.0))
        .collect();
    (alpha, map)
}

pub fn assert_close(label: &str, got: &[f64], want: &[f64]) {
    assert_eq!(got.len(), want.len(), "{label}");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= 1e-10, "{label}[{i}]: {g} vs {w}");
    }
}
