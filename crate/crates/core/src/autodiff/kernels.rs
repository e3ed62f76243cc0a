//! Forward and backward kernels for the dense layer primitives.
//!
//! Every kernel is a pure function of its inputs; the graph in
//! [`super::graph`] records which kernel produced a node and replays the
//! matching backward kernel.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `out[i, j] = sum_t x[i, t] * w[t, j] + b[j]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[0] {
        return Err(Error::dim(format!(
            "linear: input {:?} does not match weight {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (batch, n, m) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    if b.shape() != [m] {
        return Err(Error::dim(format!(
            "linear: bias {:?} does not match weight {:?}",
            b.shape(),
            w.shape()
        )));
    }
    let (xd, wd, bd) = (x.data(), w.data(), b.data());
    let mut out = Vec::with_capacity(batch * m);
    for i in 0..batch {
        out.extend_from_slice(bd);
        let row = &mut out[i * m..(i + 1) * m];
        for t in 0..n {
            let xv = xd[i * n + t];
            if xv == T::zero() {
                continue;
            }
            let wrow = &wd[t * m..(t + 1) * m];
            for (o, &wv) in row.iter_mut().zip(wrow) {
                *o = *o + xv * wv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![batch, m], out))
}

/// Returns `(grad_x, grad_w, grad_b)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (batch, n, m) = (x.shape()[0], w.shape()[0], w.shape()[1]);
    let (xd, wd) = (x.data(), w.data());
    let mut gx = vec![T::zero(); batch * n];
    let mut gw = vec![T::zero(); n * m];
    let mut gb = vec![T::zero(); m];
    for i in 0..batch {
        let go = &grad_out[i * m..(i + 1) * m];
        for (acc, &g) in gb.iter_mut().zip(go) {
            *acc = *acc + g;
        }
        for t in 0..n {
            let wrow = &wd[t * m..(t + 1) * m];
            let mut s = T::zero();
            for (&wv, &g) in wrow.iter().zip(go) {
                s = s + wv * g;
            }
            gx[i * n + t] = s;
            let xv = xd[i * n + t];
            let gwrow = &mut gw[t * m..(t + 1) * m];
            for (acc, &g) in gwrow.iter_mut().zip(go) {
                *acc = *acc + xv * g;
            }
        }
    }
    (gx, gw, gb)
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    pad: usize,
}

fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvGeometry> {
    if x.rank() != 4 || kernel.rank() != 4 || x.shape()[1] != kernel.shape()[1] {
        return Err(Error::dim(format!(
            "conv2d: input {:?} does not match kernel {:?}",
            x.shape(),
            kernel.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::param("conv2d: stride must be at least 1"));
    }
    let (batch, channels, height, width) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (filters, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
    if kh > height + 2 * pad || kw > width + 2 * pad {
        return Err(Error::dim(format!(
            "conv2d: kernel {:?} larger than padded input {:?} (pad {pad})",
            kernel.shape(),
            x.shape()
        )));
    }
    Ok(ConvGeometry {
        batch,
        channels,
        height,
        width,
        filters,
        kh,
        kw,
        out_h: (height + 2 * pad - kh) / stride + 1,
        out_w: (width + 2 * pad - kw) / stride + 1,
        stride,
        pad,
    })
}

/// Output spatial extent of a zero-padded convolution.
pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || kernel > input + 2 * pad {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

/// Zero-padded cross-correlation. `x` is `B x C x H x W`, `kernel` is
/// `F x C x kh x kw`, the optional bias has one entry per filter.
pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, kernel, stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.filters] {
            return Err(Error::dim(format!(
                "conv2d: bias {:?} for {} filters",
                b.shape(),
                g.filters
            )));
        }
    }
    let (xd, kd) = (x.data(), kernel.data());
    let plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.batch * g.filters * plane];
    for n in 0..g.batch {
        for f in 0..g.filters {
            let o = &mut out[(n * g.filters + f) * plane..(n * g.filters + f + 1) * plane];
            if let Some(b) = bias {
                o.iter_mut().for_each(|v| *v = b.data()[f]);
            }
            for c in 0..g.channels {
                let xplane = &xd[(n * g.channels + c) * g.height * g.width..][..g.height * g.width];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let kv = kd[((f * g.channels + c) * g.kh + ki) * g.kw + kj];
                        for oh in 0..g.out_h {
                            let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.height as isize {
                                continue;
                            }
                            for ow in 0..g.out_w {
                                let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.width as isize {
                                    continue;
                                }
                                let xv = xplane[ih as usize * g.width + iw as usize];
                                o[oh * g.out_w + ow] = o[oh * g.out_w + ow] + kv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![g.batch, g.filters, g.out_h, g.out_w],
        out,
    ))
}

/// Returns `(grad_x, grad_kernel, grad_bias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    pad: usize,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let g = conv_geometry(x, kernel, stride, pad)?;
    let (xd, kd) = (x.data(), kernel.data());
    let plane = g.out_h * g.out_w;
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); kernel.len()];
    let mut gb = vec![T::zero(); g.filters];
    for n in 0..g.batch {
        for f in 0..g.filters {
            let go = &grad_out[(n * g.filters + f) * plane..][..plane];
            gb[f] = gb[f] + go.iter().copied().sum::<T>();
            for c in 0..g.channels {
                let base = (n * g.channels + c) * g.height * g.width;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let kidx = ((f * g.channels + c) * g.kh + ki) * g.kw + kj;
                        let kv = kd[kidx];
                        let mut acc = T::zero();
                        for oh in 0..g.out_h {
                            let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                            if ih < 0 || ih >= g.height as isize {
                                continue;
                            }
                            for ow in 0..g.out_w {
                                let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                                if iw < 0 || iw >= g.width as isize {
                                    continue;
                                }
                                let xi = base + ih as usize * g.width + iw as usize;
                                let gv = go[oh * g.out_w + ow];
                                acc = acc + gv * xd[xi];
                                gx[xi] = gx[xi] + gv * kv;
                            }
                        }
                        gk[kidx] = gk[kidx] + acc;
                    }
                }
            }
        }
    }
    Ok((gx, gk, gb))
}

/// Max pooling without padding. Returns the pooled tensor and, for every
/// output element, the flat index of the input element it came from. Ties go
/// to the first element in row-major window order.
pub fn maxpool_forward<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    if x.rank() != 4 {
        return Err(Error::dim(format!(
            "maxpool: expected a B x C x H x W input, got {:?}",
            x.shape()
        )));
    }
    let (batch, channels, height, width) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if window == 0 || window > height || window > width {
        return Err(Error::param(format!(
            "maxpool: window {window} invalid for spatial size {height}x{width}"
        )));
    }
    if stride == 0 {
        return Err(Error::param("maxpool: stride must be at least 1"));
    }
    let out_h = (height - window) / stride + 1;
    let out_w = (width - window) / stride + 1;
    let xd = x.data();
    let mut out = Vec::with_capacity(batch * channels * out_h * out_w);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..batch * channels {
        let base = plane * height * width;
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut best = base + oh * stride * width + ow * stride;
                for i in 0..window {
                    for j in 0..window {
                        let idx = base + (oh * stride + i) * width + ow * stride + j;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::from_parts(vec![batch, channels, out_h, out_w], out),
        argmax,
    ))
}

pub fn maxpool_backward<T: Scalar>(input_len: usize, argmax: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut gx = vec![T::zero(); input_len];
    for (&idx, &g) in argmax.iter().zip(grad_out) {
        gx[idx] = gx[idx] + g;
    }
    gx
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient at zero is taken as zero.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_identity_and_hand_expansion() {
        let x = Tensor::from_rows(&[vec![1.0f32, 2.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[1.0, 2.0]);

        let x = Tensor::from_rows(&[vec![1.0f32, 1.0]]).unwrap();
        let w = Tensor::from_rows(&[vec![2.0, 3.0], vec![4.0, 5.0]]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(linear_forward(&x, &w, &b).unwrap().data(), &[7.0, 9.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 2], &mut rng);
        let b = random(&[2], &mut rng);
        let out = linear_forward(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = b.data()[j];
                for t in 0..4 {
                    s += x.data()[i * 4 + t] * w.data()[t * 2 + j];
                }
                assert!((out.data()[i * 2 + j] - s).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let x = Tensor::<f32>::zeros(&[2, 3]);
        let w = Tensor::<f32>::zeros(&[4, 2]);
        let b = Tensor::<f32>::zeros(&[2]);
        let msg = linear_forward(&x, &w, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv_all_ones_and_identity() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let out = conv2d_forward(&x, &k, None, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 1, 5, 4], &mut rng);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d_forward(&x, &k, None, 1, 0).unwrap().data(), x.data());
    }

    #[test]
    fn conv_matches_seven_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[2, 3, 8, 8], &mut rng);
        let k = random(&[4, 3, 3, 3], &mut rng);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let out = conv2d_forward(&x, &k, None, stride, pad).unwrap();
            let oh = (8 + 2 * pad - 3) / stride + 1;
            assert_eq!(out.shape(), &[2, 4, oh, oh]);
            for n in 0..2 {
                for f in 0..4 {
                    for i in 0..oh {
                        for j in 0..oh {
                            let mut s = 0.0;
                            for c in 0..3 {
                                for a in 0..3 {
                                    for b in 0..3 {
                                        let (y, z) = (
                                            (i * stride + a) as isize - pad as isize,
                                            (j * stride + b) as isize - pad as isize,
                                        );
                                        if (0..8).contains(&y) && (0..8).contains(&z) {
                                            s += x.data()
                                                [((n * 3 + c) * 8 + y as usize) * 8 + z as usize]
                                                * k.data()[((f * 3 + c) * 3 + a) * 3 + b];
                                        }
                                    }
                                }
                            }
                            let got = out.data()[((n * 4 + f) * oh + i) * oh + j];
                            assert!((got - s).abs() <= 1e-5);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let k = Tensor::<f32>::zeros(&[1, 1, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &k, None, 1, 0),
            Err(Error::Dimension(_))
        ));
        assert!(conv2d_forward(&x, &k, None, 1, 1).is_ok());
        assert!(matches!(
            conv2d_forward(&x, &k, None, 0, 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn maxpool_basic_and_ties() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let (out, arg) = maxpool_forward(&x, 2, 2).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let x = Tensor::<f32>::full(&[1, 1, 4, 4], 0.5);
        let (out, arg) = maxpool_forward(&x, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let g = maxpool_backward(16, &arg, &[1.0f32; 4]);
        assert_eq!(g.iter().filter(|&&v| v != 0.0).count(), 4);
    }

    #[test]
    fn maxpool_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[1, 1, 6, 6], &mut rng);
        let (out, _) = maxpool_forward(&x, 2, 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let m = [(0, 0), (0, 1), (1, 0), (1, 1)]
                    .iter()
                    .map(|(a, b)| x.data()[(2 * i + a) * 6 + 2 * j + b])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert_eq!(out.data()[i * 3 + j], m);
            }
        }
    }

    #[test]
    fn maxpool_rejects_bad_window() {
        let x = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(matches!(
            maxpool_forward(&x, 0, 1),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            maxpool_forward(&x, 3, 1),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn relu_values_and_subgradient() {
        let x = Tensor::new(vec![3], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(relu_backward(&x, &[1.0, 1.0, 1.0]), vec![0.0, 0.0, 1.0]);
        let neg = Tensor::new(vec![2], vec![-1.0f32, -5.0]).unwrap();
        assert!(relu_forward(&neg).data().iter().all(|&v| v == 0.0));
        assert!(relu_backward(&neg, &[3.0, 3.0]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_matches_central_difference() {
        let eps = 1e-6;
        for x0 in [3.0f64, -3.0] {
            let f = |v: f64| relu_forward(&Tensor::scalar(v)).data()[0];
            let numeric = (f(x0 + eps) - f(x0 - eps)) / (2.0 * eps);
            let analytic = relu_backward(&Tensor::scalar(x0), &[1.0])[0];
            assert!((numeric - analytic).abs() < 1e-9);
            assert_eq!(analytic, if x0 > 0.0 { 1.0 } else { 0.0 });
        }
    }
}
