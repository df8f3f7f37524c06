//! Forward and backward kernels for the primitive layers.
//!
//! Every function here is pure: the tape and the tape-free inference path both
//! call into the same code, which keeps their outputs bitwise identical.

use crate::error::TensorError;
use crate::tensor::{window_output_extent, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
}

fn dims3<T: Scalar>(t: &Tensor<T>, op: &'static str, what: &str) -> Result<(usize, usize, usize), TensorError> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(TensorError::operands(op, format!("{what} must be rank 3 (C,H,W), got {:?}", t.shape()))),
    }
}

fn dims4<T: Scalar>(t: &Tensor<T>, op: &'static str, what: &str) -> Result<[usize; 4], TensorError> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::operands(op, format!("{what} must be rank 4, got {:?}", t.shape()))),
    }
}

/// Output shape of `conv2d` for the given operand shapes.
pub fn conv2d_output_shape(
    input: &[usize],
    kernel: &[usize],
    geom: ConvGeometry,
) -> Result<[usize; 3], TensorError> {
    const OP: &str = "conv2d";
    let (&[c_in, h, w], &[c_out, k_in, kh, kw]) = (input, kernel) else {
        return Err(TensorError::operands(
            OP,
            format!("expected input (C,H,W) and kernel (O,C,kH,kW), got {input:?} and {kernel:?}"),
        ));
    };
    if geom.stride == 0 {
        return Err(TensorError::operands(OP, "stride must be >= 1"));
    }
    if k_in != c_in {
        return Err(TensorError::operands(
            OP,
            format!("kernel expects {k_in} input channels, input has {c_in}"),
        ));
    }
    let oh = window_output_extent(h, kh, geom.stride, geom.padding);
    let ow = window_output_extent(w, kw, geom.stride, geom.padding);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok([c_out, oh, ow]),
        _ => Err(TensorError::operands(
            OP,
            format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {}",
                geom.padding
            ),
        )),
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `k`:
/// those `o` with `0 <= o*stride + k - padding < input`.
fn valid_range(out: usize, input: usize, k: usize, stride: usize, padding: usize) -> (usize, usize) {
    let k = k as isize;
    let p = padding as isize;
    let s = stride as isize;
    let lo = if k >= p { 0 } else { (p - k + s - 1) / s };
    // largest o with o*s + k - p <= input - 1
    let top = input as isize - 1 + p - k;
    let hi = if top < 0 { 0 } else { (top / s + 1).min(out as isize) };
    (lo.max(0) as usize, hi.max(lo) as usize)
}

/// Cross-correlation of a (C_in,H,W) input with a (C_out,C_in,kH,kW) kernel.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<Tensor<T>, TensorError> {
    let [c_out, oh, ow] = conv2d_output_shape(input.shape(), kernel.shape(), geom)?;
    bias.expect_shape(&[c_out])?;
    let (c_in, h, w) = dims3(input, "conv2d", "input")?;
    let [_, _, kh, kw] = dims4(kernel, "conv2d", "kernel")?;
    let (s, p) = (geom.stride, geom.padding);
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); c_out * oh * ow];
    for co in 0..c_out {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(bias.data()[co]);
        for ci in 0..c_in {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (y0, y1) = valid_range(oh, h, ky, s, p);
                for kx in 0..kw {
                    let wv = k[((co * c_in + ci) * kh + ky) * kw + kx];
                    let (x0, x1) = valid_range(ow, w, kx, s, p);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - p;
                        let row = &xin[iy * w..(iy + 1) * w];
                        let orow = &mut plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let shift = kx as isize - p as isize;
                            let src = &row[(x0 as isize + shift) as usize..(x1 as isize + shift) as usize];
                            for (o, &v) in orow[x0..x1].iter_mut().zip(src) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in x0..x1 {
                                orow[ox] += wv * row[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// Gradients of `conv2d` with respect to input, kernel and bias.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeometry,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let out_shape = conv2d_output_shape(input.shape(), kernel.shape(), geom)?;
    grad_out.expect_shape(&out_shape)?;
    let [c_out, oh, ow] = out_shape;
    let (c_in, h, w) = dims3(input, "conv2d", "input")?;
    let [_, _, kh, kw] = dims4(kernel, "conv2d", "kernel")?;
    let (s, p) = (geom.stride, geom.padding);
    let g = grad_out.data();
    let x = input.data();
    let k = kernel.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let mut gb = vec![T::zero(); c_out];
    for co in 0..c_out {
        let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
        gb[co] = gplane.iter().copied().sum();
        for ci in 0..c_in {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            let gxin = &mut gx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (y0, y1) = valid_range(oh, h, ky, s, p);
                for kx in 0..kw {
                    let widx = ((co * c_in + ci) * kh + ky) * kw + kx;
                    let wv = k[widx];
                    let (x0, x1) = valid_range(ow, w, kx, s, p);
                    let mut acc = T::zero();
                    for oy in y0..y1 {
                        let iy = oy * s + ky - p;
                        let grow = &gplane[oy * ow..(oy + 1) * ow];
                        for ox in x0..x1 {
                            let ix = iy * w + ox * s + kx - p;
                            acc += grow[ox] * xin[ix];
                            gxin[ix] += wv * grow[ox];
                        }
                    }
                    gk[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![c_out], gb)?,
    ))
}

/// Output shape of a transposed convolution with a (C_in,C_out,kH,kW) kernel.
/// `output_padding` is `[rows, cols]`.
pub fn conv_transpose2d_output_shape(
    input: &[usize],
    kernel: &[usize],
    geom: ConvGeometry,
    output_padding: [usize; 2],
) -> Result<[usize; 3], TensorError> {
    const OP: &str = "conv_transpose2d";
    let (&[c_in, h, w], &[k_in, c_out, kh, kw]) = (input, kernel) else {
        return Err(TensorError::operands(
            OP,
            format!("expected input (C,H,W) and kernel (C,O,kH,kW), got {input:?} and {kernel:?}"),
        ));
    };
    if geom.stride == 0 {
        return Err(TensorError::operands(OP, "stride must be >= 1"));
    }
    if k_in != c_in {
        return Err(TensorError::operands(
            OP,
            format!("kernel expects {k_in} input channels, input has {c_in}"),
        ));
    }
    if output_padding.iter().any(|&op| op >= geom.stride) {
        return Err(TensorError::operands(OP, "output padding must be smaller than stride"));
    }
    let extent = |n: usize, k: usize, op: usize| {
        ((n - 1) * geom.stride + k + op)
            .checked_sub(2 * geom.padding)
            .filter(|&e| e > 0)
    };
    match (extent(h, kh, output_padding[0]), extent(w, kw, output_padding[1])) {
        (Some(oh), Some(ow)) => Ok([c_out, oh, ow]),
        _ => Err(TensorError::operands(OP, "padding removes the whole output")),
    }
}

/// Transposed convolution (the adjoint of `conv2d` in its input argument, plus bias).
pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    geom: ConvGeometry,
    output_padding: [usize; 2],
) -> Result<Tensor<T>, TensorError> {
    let [c_out, oh, ow] = conv_transpose2d_output_shape(input.shape(), kernel.shape(), geom, output_padding)?;
    bias.expect_shape(&[c_out])?;
    let (c_in, h, w) = dims3(input, "conv_transpose2d", "input")?;
    let [_, _, kh, kw] = dims4(kernel, "conv_transpose2d", "kernel")?;
    let (s, p) = (geom.stride, geom.padding);
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![T::zero(); c_out * oh * ow];
    for co in 0..c_out {
        out[co * oh * ow..(co + 1) * oh * ow].fill(bias.data()[co]);
    }
    // out[co, iy*s + ky - p, ix*s + kx - p] += x[ci, iy, ix] * k[ci, co, ky, kx]
    for ci in 0..c_in {
        let xin = &x[ci * h * w..(ci + 1) * h * w];
        for co in 0..c_out {
            let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..kh {
                let (y0, y1) = valid_range(h, oh, ky, s, p);
                for kx in 0..kw {
                    let wv = k[((ci * c_out + co) * kh + ky) * kw + kx];
                    let (x0, x1) = valid_range(w, ow, kx, s, p);
                    for iy in y0..y1 {
                        let oy = iy * s + ky - p;
                        for ix in x0..x1 {
                            plane[oy * ow + ix * s + kx - p] += xin[iy * w + ix] * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    geom: ConvGeometry,
    output_padding: [usize; 2],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let out_shape = conv_transpose2d_output_shape(input.shape(), kernel.shape(), geom, output_padding)?;
    grad_out.expect_shape(&out_shape)?;
    let [c_out, oh, ow] = out_shape;
    let (c_in, h, w) = dims3(input, "conv_transpose2d", "input")?;
    let [_, _, kh, kw] = dims4(kernel, "conv_transpose2d", "kernel")?;
    let (s, p) = (geom.stride, geom.padding);
    let g = grad_out.data();
    let x = input.data();
    let k = kernel.data();
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); k.len()];
    let gb: Vec<T> = (0..c_out)
        .map(|co| g[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum())
        .collect();
    for ci in 0..c_in {
        let xin = &x[ci * h * w..(ci + 1) * h * w];
        let gxin = &mut gx[ci * h * w..(ci + 1) * h * w];
        for co in 0..c_out {
            let gplane = &g[co * oh * ow..(co + 1) * oh * ow];
            for ky in 0..kh {
                let (y0, y1) = valid_range(h, oh, ky, s, p);
                for kx in 0..kw {
                    let widx = ((ci * c_out + co) * kh + ky) * kw + kx;
                    let wv = k[widx];
                    let (x0, x1) = valid_range(w, ow, kx, s, p);
                    let mut acc = T::zero();
                    for iy in y0..y1 {
                        let oy = iy * s + ky - p;
                        for ix in x0..x1 {
                            let go = gplane[oy * ow + ix * s + kx - p];
                            acc += xin[iy * w + ix] * go;
                            gxin[iy * w + ix] += go * wv;
                        }
                    }
                    gk[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(kernel.shape().to_vec(), gk)?,
        Tensor::new(vec![c_out], gb)?,
    ))
}

pub fn maxpool2d_output_shape(input: &[usize], k: usize, stride: usize) -> Result<[usize; 3], TensorError> {
    const OP: &str = "maxpool2d";
    let &[c, h, w] = input else {
        return Err(TensorError::operands(OP, format!("input must be (C,H,W), got {input:?}")));
    };
    if stride == 0 || k == 0 {
        return Err(TensorError::operands(OP, "window and stride must be >= 1"));
    }
    match (window_output_extent(h, k, stride, 0), window_output_extent(w, k, stride, 0)) {
        (Some(oh), Some(ow)) => Ok([c, oh, ow]),
        _ => Err(TensorError::operands(OP, format!("window {k}x{k} exceeds input {h}x{w}"))),
    }
}

/// Max pooling. Also returns, per output element, the flat input index of the
/// window maximum (first occurrence in row-major order on ties).
pub fn maxpool2d<T: Scalar>(input: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, Vec<u32>), TensorError> {
    let [c, oh, ow] = maxpool2d_output_shape(input.shape(), k, stride)?;
    let (_, h, w) = dims3(input, "maxpool2d", "input")?;
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..k {
                    let row = base + (oy * stride + dy) * w + ox * stride;
                    for dx in 0..k {
                        if x[row + dx] > x[best] {
                            best = row + dx;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(vec![c, oh, ow], out)?, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize], argmax: &[u32]) -> Tensor<T> {
    let mut gx = Tensor::zeros(input_shape);
    let data = gx.data_mut();
    for (&g, &idx) in grad_out.data().iter().zip(argmax) {
        data[idx as usize] += g;
    }
    gx
}

/// `weight · input + bias` with weight (out, in) and a flat input.
pub fn dense<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let &[n_out, n_in] = weight.shape() else {
        return Err(TensorError::operands("dense", format!("weight must be (out,in), got {:?}", weight.shape())));
    };
    if input.numel() != n_in {
        return Err(TensorError::operands(
            "dense",
            format!("weight expects {n_in} inputs, input has {} ({:?})", input.numel(), input.shape()),
        ));
    }
    bias.expect_shape(&[n_out])?;
    let x = input.data();
    let out = weight
        .data()
        .chunks_exact(n_in)
        .zip(bias.data())
        .map(|(row, &b)| row.iter().zip(x).fold(T::zero(), |acc, (&wv, &xv)| acc + wv * xv) + b)
        .collect();
    Tensor::new(vec![n_out], out)
}

pub fn dense_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>), TensorError> {
    let &[n_out, n_in] = weight.shape() else {
        return Err(TensorError::operands("dense", "weight must be (out,in)"));
    };
    grad_out.expect_shape(&[n_out])?;
    let x = input.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n_in];
    let mut gw = vec![T::zero(); n_out * n_in];
    for (o, (row, grow)) in weight.data().chunks_exact(n_in).zip(gw.chunks_exact_mut(n_in)).enumerate() {
        let go = g[o];
        for i in 0..n_in {
            grow[i] = go * x[i];
            gx[i] += go * row[i];
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(vec![n_out, n_in], gw)?,
        grad_out.clone(),
    ))
}

/// Numerically stable softmax of a flat vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const UNIT: ConvGeometry = ConvGeometry { stride: 1, padding: 0 };

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_slice(shape, v).unwrap()
    }

    /// Direct evaluation of the cross-correlation sum with explicit bounds checks.
    fn conv_reference(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * p - kh) / s + 1;
        let ow = (w + 2 * p - kw) / s + 1;
        Tensor::from_fn(&[co, oh, ow], |idx| {
            let (o, rem) = (idx / (oh * ow), idx % (oh * ow));
            let (oy, ox) = (rem / ow, rem % ow);
            let mut acc = b.data()[o];
            for c in 0..ci {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let iy = (oy * s + dy) as isize - p as isize;
                        let ix = (ox * s + dx) as isize - p as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x.data()[(c * h + iy as usize) * w + ix as usize]
                                * k.data()[((o * ci + c) * kh + dy) * kw + dx];
                        }
                    }
                }
            }
            acc
        })
    }

    fn pseudo_random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn identity_kernel_returns_input() {
        let x = pseudo_random(&[1, 5, 4], 1);
        let k = t(&[1, 1, 1, 1], &[1.0]);
        let b = t(&[1], &[0.0]);
        assert_eq!(conv2d(&x, &k, &b, UNIT).unwrap(), x);
    }

    #[test]
    fn diagonal_kernel_sums_diagonal() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[1], &[0.0]);
        let y = conv2d(&x, &k, &b, UNIT).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn strided_padded_output_shape() {
        let s = conv2d_output_shape(&[3, 32, 32], &[8, 3, 3, 3], ConvGeometry { stride: 2, padding: 1 }).unwrap();
        assert_eq!(s, [8, 16, 16]);
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let err = conv2d_output_shape(&[3, 8, 8], &[4, 2, 3, 3], UNIT).unwrap_err();
        assert!(err.to_string().contains("2 input channels"), "{err}");
        let err = conv2d_output_shape(&[1, 2, 2], &[1, 1, 3, 3], UNIT).unwrap_err();
        assert!(err.to_string().contains("3x3"), "{err}");
    }

    #[test]
    fn conv_matches_direct_sum_across_geometries() {
        for (seed, (s, p, h, w)) in [(1, 1, 5, 5), (2, 1, 7, 6), (1, 0, 4, 4), (2, 0, 6, 5), (3, 2, 7, 7)]
            .into_iter()
            .enumerate()
        {
            let x = pseudo_random(&[2, h, w], seed as u64);
            let k = pseudo_random(&[3, 2, 3, 3], 100 + seed as u64);
            let b = pseudo_random(&[3], 200 + seed as u64);
            let got = conv2d(&x, &k, &b, ConvGeometry { stride: s, padding: p }).unwrap();
            let want = conv_reference(&x, &k, &b, s, p);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with matching geometry and zero bias.
        let geom = ConvGeometry { stride: 2, padding: 1 };
        let x = pseudo_random(&[2, 7, 7], 4);
        let k = pseudo_random(&[3, 2, 3, 3], 5);
        let zero3 = Tensor::zeros(&[3]);
        let cx = conv2d(&x, &k, &zero3, geom).unwrap();
        let y = pseudo_random(cx.shape(), 6);
        // conv kernel (O,C,kh,kw) viewed as a transposed kernel (C_in=O, C_out=C)
        let kt = k.clone();
        let zero2 = Tensor::zeros(&[2]);
        let ty = conv_transpose2d(&y, &kt, &zero2, geom, [0, 0]).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn transposed_conv_output_padding_restores_extent() {
        let geom = ConvGeometry { stride: 2, padding: 1 };
        assert_eq!(conv_transpose2d_output_shape(&[4, 4, 4], &[4, 2, 3, 3], geom, [1, 1]).unwrap(), [2, 8, 8]);
        assert_eq!(conv_transpose2d_output_shape(&[4, 4, 4], &[4, 2, 3, 3], geom, [0, 0]).unwrap(), [2, 7, 7]);
        assert_eq!(conv_transpose2d_output_shape(&[4, 4, 4], &[4, 2, 3, 3], geom, [1, 0]).unwrap(), [2, 8, 7]);
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::<f64>::full(&[1, 4, 4], 0.5);
        let (y, arg) = maxpool2d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
        let g = maxpool2d_backward(&Tensor::<f64>::ones(&[1, 2, 2]), c.shape(), &arg);
        let expected = [1., 0., 1., 0., 0., 0., 0., 0., 1., 0., 1., 0., 0., 0., 0., 0.];
        assert_eq!(g.data(), &expected);
    }

    #[test]
    fn maxpool_matches_window_scan() {
        for seed in 0..10 {
            let x = pseudo_random(&[2, 4, 4], seed);
            let (y, _) = maxpool2d(&x, 2, 2).unwrap();
            for c in 0..2 {
                for oy in 0..2 {
                    for ox in 0..2 {
                        let mut m = f64::NEG_INFINITY;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(x.data()[c * 16 + (2 * oy + dy) * 4 + 2 * ox + dx]);
                            }
                        }
                        assert_eq!(y.data()[c * 4 + oy * 2 + ox], m);
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_window_too_large() {
        assert!(maxpool2d(&Tensor::<f32>::zeros(&[1, 1, 3]), 2, 2).is_err());
    }

    #[test]
    fn dense_rejects_wrong_width() {
        let x = Tensor::<f32>::zeros(&[5]);
        let w = Tensor::<f32>::zeros(&[2, 4]);
        let b = Tensor::<f32>::zeros(&[2]);
        assert!(dense(&x, &w, &b).is_err());
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0f64, 1000.0, 999.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(p[0] == p[1] && p[1] > p[2]);
    }
}
