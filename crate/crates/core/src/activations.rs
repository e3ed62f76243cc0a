//! Binarizing activations and their batch-normalization companion.
//!
//! ABC maps `x` to `1 + r*x` for `x > 0` and to `r*x` otherwise, with a
//! constant derivative `r` (also at `x = 0`). At `r = 0` its output is exactly
//! 0 or 1. The scaled hyperbolic tangent `tanh(alpha*x)` is the saturating
//! alternative. Batch normalization sits directly in front of ABC so that the
//! pre-activation scale stays stable while `r` shrinks.

use serde::{Deserialize, Serialize};

use crate::codes::{bytes_per_code, PackedCodeMatrix};
use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::tensor::{Scalar, Tensor};

/// ABC slope. Driven by a schedule, never learned.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct AbcParams {
    r: f64,
}

impl AbcParams {
    pub fn new(r: f64) -> Result<Self> {
        if !(r >= 0.0) || !r.is_finite() {
            return Err(Error::param(format!(
                "ABC slope r must be finite and >= 0, got {r}"
            )));
        }
        Ok(AbcParams { r })
    }

    pub fn r(self) -> f64 {
        self.r
    }
}

impl TryFrom<f64> for AbcParams {
    type Error = Error;

    fn try_from(r: f64) -> Result<Self> {
        AbcParams::new(r)
    }
}

impl From<AbcParams> for f64 {
    fn from(p: AbcParams) -> f64 {
        p.r
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct ScaledTanhParams {
    alpha: f64,
}

impl ScaledTanhParams {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::param(format!(
                "tanh scale alpha must be finite and > 0, got {alpha}"
            )));
        }
        Ok(ScaledTanhParams { alpha })
    }

    pub fn alpha(self) -> f64 {
        self.alpha
    }
}

impl TryFrom<f64> for ScaledTanhParams {
    type Error = Error;

    fn try_from(alpha: f64) -> Result<Self> {
        ScaledTanhParams::new(alpha)
    }
}

impl From<ScaledTanhParams> for f64 {
    fn from(p: ScaledTanhParams) -> f64 {
        p.alpha
    }
}

#[inline]
pub fn abc<T: Scalar>(x: T, r: T) -> T {
    if x > T::zero() {
        T::one() + r * x
    } else {
        // `+ 0` turns the -0 of `0 * -x` into +0, keeping clamped output bit-exact.
        r * x + T::zero()
    }
}

pub fn abc_forward<T: Scalar>(x: &Tensor<T>, r: f64) -> Result<Tensor<T>> {
    let r = T::lit(AbcParams::new(r)?.r());
    Ok(x.map(|v| abc(v, r)))
}

/// The derivative is `r` everywhere, so the upstream gradient is just scaled.
pub fn abc_backward<T: Scalar>(grad_out: &Tensor<T>, r: f64) -> Tensor<T> {
    let r = T::lit(r);
    grad_out.map(|g| g * r)
}

pub fn scaled_tanh_forward<T: Scalar>(x: &Tensor<T>, alpha: f64) -> Result<Tensor<T>> {
    let a = T::lit(ScaledTanhParams::new(alpha)?.alpha());
    Ok(x.map(|v| (a * v).tanh()))
}

pub fn scaled_tanh_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    x: &Tensor<T>,
    alpha: f64,
) -> Result<Tensor<T>> {
    grad_out.same_shape(x)?;
    let a = T::lit(alpha);
    let data = grad_out
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| {
            let t = (a * v).tanh();
            g * a * (T::one() - t * t)
        })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization with learned affine and running statistics.
///
/// Channels are the second axis of a `B x C` or `B x C x H x W` input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct BatchNormState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<U: Scalar>(&self) -> BatchNormState<U> {
        BatchNormState {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self
                .running_mean
                .iter()
                .map(|v| U::lit(v.as_f64()))
                .collect(),
            running_var: self
                .running_var
                .iter()
                .map(|v| U::lit(v.as_f64()))
                .collect(),
            momentum: self.momentum,
            eps: self.eps,
            mode: self.mode,
        }
    }

    /// Folds one batch's statistics into the running estimates. `var` is the
    /// biased batch variance over `count` elements; the running estimate
    /// stores the unbiased one.
    pub fn update_running(&mut self, mean: &[T], var: &[T], count: usize) {
        let m = T::lit(self.momentum);
        let keep = T::one() - m;
        let unbias = T::lit(count as f64 / (count as f64 - 1.0).max(1.0));
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + m * mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * var[c] * unbias;
        }
    }
}

/// Iterates the flat indices of channel `c`.
fn channel_indices(shape: &[usize], c: usize) -> impl Iterator<Item = usize> {
    let (batch, channels) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    (0..batch).flat_map(move |b| {
        let base = (b * channels + c) * spatial;
        base..base + spatial
    })
}

fn check_bn_input<T: Scalar>(x: &Tensor<T>, channels: usize) -> Result<()> {
    if x.rank() < 2 || x.shape()[1] != channels {
        return Err(Error::dim(format!(
            "batchnorm over {channels} channels got input {:?}",
            x.shape()
        )));
    }
    Ok(())
}

/// Everything the backward pass needs from a train-mode normalization.
#[derive(Clone, Debug)]
pub struct BatchNormTrainOutput<T> {
    pub output: Tensor<T>,
    pub normalized: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Normalizes with batch statistics (biased variance) and applies the affine.
pub fn batchnorm_train_kernel<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<BatchNormTrainOutput<T>> {
    let channels = gamma.len();
    check_bn_input(x, channels)?;
    if x.shape()[0] < 2 {
        return Err(Error::param(
            "batchnorm in train mode needs a batch of at least 2",
        ));
    }
    let count = x.len() / channels;
    let n = T::lit(count as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    let (mut means, mut vars, mut inv_stds) = (Vec::new(), Vec::new(), Vec::new());
    for c in 0..channels {
        let mean = channel_indices(x.shape(), c).map(|i| xd[i]).sum::<T>() / n;
        let var = channel_indices(x.shape(), c)
            .map(|i| (xd[i] - mean) * (xd[i] - mean))
            .sum::<T>()
            / n;
        let inv_std = T::one() / (var + T::lit(eps)).sqrt();
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for i in channel_indices(x.shape(), c) {
            let h = (xd[i] - mean) * inv_std;
            normalized[i] = h;
            out[i] = g * h + b;
        }
        means.push(mean);
        vars.push(var);
        inv_stds.push(inv_std);
    }
    Ok(BatchNormTrainOutput {
        output: Tensor::from_parts(x.shape().to_vec(), out),
        normalized,
        inv_std: inv_stds,
        mean: means,
        var: vars,
        count,
    })
}

/// Normalizes with fixed statistics. Returns the output and the
/// normalized (pre-affine) values.
pub fn batchnorm_eval_kernel<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[T],
    inv_std: &[T],
) -> Result<(Tensor<T>, Vec<T>)> {
    let channels = gamma.len();
    check_bn_input(x, channels)?;
    let xd = x.data();
    let mut out = vec![T::zero(); x.len()];
    let mut normalized = vec![T::zero(); x.len()];
    for c in 0..channels {
        for i in channel_indices(x.shape(), c) {
            let h = (xd[i] - mean[c]) * inv_std[c];
            normalized[i] = h;
            out[i] = gamma.data()[c] * h + beta.data()[c];
        }
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), normalized))
}

pub fn inv_std_of<T: Scalar>(var: &[T], eps: f64) -> Vec<T> {
    var.iter()
        .map(|&v| T::one() / (v + T::lit(eps)).sqrt())
        .collect()
}

/// Gradients of a normalization. With `batch_stats` the mean and variance
/// depend on the input and contribute the usual correction terms; otherwise
/// the map is affine per channel. Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    shape: &[usize],
    grad_out: &[T],
    normalized: &[T],
    inv_std: &[T],
    gamma: &Tensor<T>,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let channels = gamma.len();
    let mut gx = vec![T::zero(); grad_out.len()];
    let mut ggamma = vec![T::zero(); channels];
    let mut gbeta = vec![T::zero(); channels];
    for c in 0..channels {
        let (mut sum_g, mut sum_gh, mut count) = (T::zero(), T::zero(), 0usize);
        for i in channel_indices(shape, c) {
            sum_g = sum_g + grad_out[i];
            sum_gh = sum_gh + grad_out[i] * normalized[i];
            count += 1;
        }
        ggamma[c] = sum_gh;
        gbeta[c] = sum_g;
        let scale = gamma.data()[c] * inv_std[c];
        if batch_stats {
            let n = T::lit(count as f64);
            for i in channel_indices(shape, c) {
                gx[i] = scale / n * (n * grad_out[i] - sum_g - normalized[i] * sum_gh);
            }
        } else {
            for i in channel_indices(shape, c) {
                gx[i] = scale * grad_out[i];
            }
        }
    }
    (gx, ggamma, gbeta)
}

/// Standalone normalization honoring `state.mode`; train mode updates the
/// running statistics.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    state: &mut BatchNormState<T>,
) -> Result<Tensor<T>> {
    match state.mode {
        Mode::Train => {
            let out = batchnorm_train_kernel(x, &state.gamma, &state.beta, state.eps)?;
            state.update_running(&out.mean, &out.var, out.count);
            Ok(out.output)
        }
        Mode::Eval => {
            let inv_std = inv_std_of(&state.running_var, state.eps);
            Ok(
                batchnorm_eval_kernel(x, &state.gamma, &state.beta, &state.running_mean, &inv_std)?
                    .0,
            )
        }
    }
}

/// How a real-valued pre-activation becomes a bit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinarizeRule {
    /// ABC at `r = 0`: bit set iff `x > 0`; `x = 0` maps to 0.
    Abc,
    /// Sign function with `sgn(0) = +1`: bit set iff `x >= 0`.
    Sign,
}

impl BinarizeRule {
    #[inline]
    pub fn bit<T: Scalar>(self, x: T) -> bool {
        match self {
            BinarizeRule::Abc => x > T::zero(),
            BinarizeRule::Sign => x >= T::zero(),
        }
    }
}

/// Thresholds an `N x k` matrix of binarizing-layer inputs into packed codes.
/// Label sets start empty; attach them with [`PackedCodeMatrix::with_labels`].
pub fn extract_binary_codes<T: Scalar>(
    activations: &Tensor<T>,
    rule: BinarizeRule,
) -> Result<PackedCodeMatrix> {
    if activations.rank() != 2 {
        return Err(Error::dim(format!(
            "code extraction expects an N x k matrix, got {:?}",
            activations.shape()
        )));
    }
    let (n, k) = (activations.shape()[0], activations.shape()[1]);
    let stride = bytes_per_code(k);
    let mut bytes = vec![0u8; n * stride];
    for i in 0..n {
        let row = activations.row(i);
        let out = &mut bytes[i * stride..(i + 1) * stride];
        for (j, &v) in row.iter().enumerate() {
            if rule.bit(v) {
                out[j / 8] |= 1 << (j % 8);
            }
        }
    }
    PackedCodeMatrix::from_packed(k, bytes, vec![LabelSet::default(); n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn abc_forward_examples() {
        assert_eq!(
            abc_forward(&t(&[0.5, -0.5]), 1.0).unwrap().data(),
            &[1.5, -0.5]
        );
        assert_eq!(
            abc_forward(&t(&[3.0, -3.0, 0.0]), 0.0).unwrap().data(),
            &[1.0, 0.0, 0.0]
        );
        assert_eq!(
            abc_forward(&t(&[2.0, -2.0]), 0.25).unwrap().data(),
            &[1.5, -0.5]
        );
        assert!(matches!(
            abc_forward(&t(&[1.0]), -0.1),
            Err(Error::Parameter(_))
        ));
        assert!(AbcParams::new(f64::NAN).is_err());
    }

    #[test]
    fn abc_backward_examples() {
        let ones = t(&[1.0; 4]);
        assert!(abc_backward(&ones, 0.5).data().iter().all(|&g| g == 0.5));
        assert!(abc_backward(&ones, 0.0).data().iter().all(|&g| g == 0.0));
        let g = t(&[0.3, -2.0, 7.5]);
        assert_eq!(abc_backward(&g, 1.0).data(), g.data());
    }

    #[test]
    fn tanh_saturation_example() {
        let y = scaled_tanh_forward(&t(&[0.0001]), 10000.0).unwrap();
        assert!((y.data()[0] - 0.7616).abs() <= 5e-5);
        for a in [0.5, 1.0, 8.0, 1e4] {
            assert_eq!(scaled_tanh_forward(&t(&[0.0]), a).unwrap().data(), &[0.0]);
        }
        assert!(scaled_tanh_forward(&t(&[1.0]), 0.0).is_err());
        assert!(scaled_tanh_forward(&t(&[1.0]), -1.0).is_err());
    }

    /// tanh(1) from its exponential series, summed in f64.
    fn tanh_series(x: f64) -> f64 {
        let mut e = 0.0;
        let mut term = 1.0;
        for n in 0..40 {
            e += term;
            term *= 2.0 * x / (n as f64 + 1.0);
        }
        (e - 1.0) / (e + 1.0)
    }

    #[test]
    fn tanh_matches_series_oracle() {
        let y = scaled_tanh_forward(&Tensor::scalar(1.0f64), 1.0)
            .unwrap()
            .data()[0];
        assert!((y - tanh_series(1.0)).abs() < 1e-12);
        assert!((y - 0.76159).abs() < 1e-5);
    }

    #[test]
    fn tanh_backward_examples() {
        let g = scaled_tanh_backward(&Tensor::scalar(1.0f64), &Tensor::scalar(0.0), 2.0).unwrap();
        assert_eq!(g.data(), &[2.0]);
        let g = scaled_tanh_backward(&Tensor::scalar(1.0f64), &Tensor::scalar(1.0), 8.0).unwrap();
        assert!(g.data()[0].abs() <= 1e-5);
    }

    #[test]
    fn tanh_backward_matches_central_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let eps = 1e-6;
        for _ in 0..200 {
            let x: f64 = rng.random_range(-2.0..2.0);
            let a: f64 = rng.random_range(0.1..5.0);
            let f = |v: f64| scaled_tanh_forward(&Tensor::scalar(v), a).unwrap().data()[0];
            let numeric = (f(x + eps) - f(x - eps)) / (2.0 * eps);
            let analytic = scaled_tanh_backward(&Tensor::scalar(1.0), &Tensor::scalar(x), a)
                .unwrap()
                .data()[0];
            assert!((numeric - analytic).abs() <= 1e-6, "x={x} a={a}");
        }
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(
            vec![16, 3],
            (0..48).map(|_| rng.random_range(-5.0..9.0f64)).collect(),
        )
        .unwrap();
        let mut state = BatchNormState::<f64>::new(3);
        let y = batchnorm_forward(&x, &mut state).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..16).map(|i| y.data()[i * 3 + c]).collect();
            let mean = col.iter().sum::<f64>() / 16.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batchnorm_eval_identity_and_batch_of_one() {
        let mut state = BatchNormState::<f32>::new(2);
        state.mode = Mode::Eval;
        let x = Tensor::from_rows(&[vec![0.3f32, -1.2]]).unwrap();
        let y = batchnorm_forward(&x, &mut state).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-5);
        }
        state.mode = Mode::Train;
        assert!(matches!(
            batchnorm_forward(&x, &mut state),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn batchnorm_train_then_eval_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // 4-D input: channels on axis 1.
        let shape = vec![5, 2, 3, 3];
        let mut state = BatchNormState::<f64>::new(2);
        state.gamma = Tensor::new(vec![2], vec![1.5, 0.7]).unwrap();
        state.beta = Tensor::new(vec![2], vec![-0.2, 0.4]).unwrap();
        let mut oracle_mean = [0.0f64; 2];
        let mut oracle_var = [1.0f64; 2];
        for _ in 0..4 {
            let x = Tensor::new(
                shape.clone(),
                (0..90).map(|_| rng.random_range(-2.0..3.0)).collect(),
            )
            .unwrap();
            batchnorm_forward(&x, &mut state).unwrap();
            for c in 0..2 {
                let vals: Vec<f64> = (0..5)
                    .flat_map(|b| (0..9).map(move |s| (b * 2 + c) * 9 + s))
                    .map(|i| x.data()[i])
                    .collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v =
                    vals.iter().map(|z| (z - m) * (z - m)).sum::<f64>() / (vals.len() - 1) as f64;
                oracle_mean[c] = 0.9 * oracle_mean[c] + 0.1 * m;
                oracle_var[c] = 0.9 * oracle_var[c] + 0.1 * v;
            }
        }
        for c in 0..2 {
            assert!((state.running_mean[c] - oracle_mean[c]).abs() <= 1e-5);
            assert!((state.running_var[c] - oracle_var[c]).abs() <= 1e-5);
        }
        state.mode = Mode::Eval;
        let x = Tensor::new(
            shape.clone(),
            (0..90).map(|_| rng.random_range(-2.0..3.0)).collect(),
        )
        .unwrap();
        let y = batchnorm_forward(&x, &mut state).unwrap();
        for (i, (&yv, &xv)) in y.data().iter().zip(x.data()).enumerate() {
            let c = (i / 9) % 2;
            let expect = state.gamma.data()[c] * (xv - oracle_mean[c])
                / (oracle_var[c] + 1e-5).sqrt()
                + state.beta.data()[c];
            assert!((yv - expect).abs() <= 1e-5);
        }
        let again = batchnorm_forward(&x, &mut state).unwrap();
        assert_eq!(again, y);
    }

    #[test]
    fn extraction_conventions() {
        let acts = Tensor::from_rows(&[vec![0.3f32, -0.2, 0.0]]).unwrap();
        let abc_codes = extract_binary_codes(&acts, BinarizeRule::Abc).unwrap();
        assert_eq!(
            (0..3).map(|j| abc_codes.bit(0, j)).collect::<Vec<_>>(),
            [true, false, false]
        );
        let sign_codes = extract_binary_codes(&acts, BinarizeRule::Sign).unwrap();
        assert_eq!(
            (0..3).map(|j| sign_codes.bit(0, j)).collect::<Vec<_>>(),
            [true, false, true]
        );

        let pos = Tensor::from_rows(&[vec![0.5f32; 12]]).unwrap();
        let c = extract_binary_codes(&pos, BinarizeRule::Abc).unwrap();
        assert_eq!(c.bits(), 12);
        assert_eq!(u16::from_le_bytes([c.code(0)[0], c.code(0)[1]]), 0xFFF);
    }

    proptest! {
        #[test]
        fn abc_is_monotone_and_binary_at_zero(r in 0.0f64..4.0, a in -1e3f64..1e3, b in -1e3f64..1e3) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(abc(lo, r) <= abc(hi, r));
            let y = abc(a, 0.0);
            prop_assert!(y == 0.0 || y == 1.0);
        }

        #[test]
        fn abc_shrinks_gap_to_target(r in 1e-6f64..0.999, x in -1.0f64..1.0) {
            prop_assume!(x != 0.0);
            let target = if x > 0.0 { 1.0 } else { 0.0 };
            let gap = (abc(x, r) - target).abs();
            prop_assert!((gap - r * x.abs()).abs() <= 1e-12);
            prop_assert!(gap < x.abs());
        }

        #[test]
        fn abc_jump_at_origin_is_one(r in 1e-3f64..10.0) {
            let eps = 1e-12;
            prop_assert!(((abc(eps, r) - abc(-eps, r)) - 1.0).abs() < 1e-10);
        }

        #[test]
        fn tanh_saturates_where_abc_does_not(x in 2.0f64..50.0, sign in prop::bool::ANY, r in 0.0f64..2.0) {
            let x = if sign { x } else { -x };
            let g = scaled_tanh_backward(&Tensor::scalar(1.0), &Tensor::scalar(x), 8.0).unwrap().data()[0];
            prop_assert!(g < 1e-4);
            prop_assert_eq!(abc_backward(&Tensor::scalar(1.0), r).data()[0], r);
        }

        #[test]
        fn abc_extraction_equals_abc_at_zero(vals in prop::collection::vec(-3.0f32..3.0, 1..40)) {
            let mut vals = vals;
            vals[0] = 0.0;
            let acts = Tensor::new(vec![1, vals.len()], vals.clone()).unwrap();
            let codes = extract_binary_codes(&acts, BinarizeRule::Abc).unwrap();
            let clamped = abc_forward(&acts, 0.0).unwrap();
            for (j, &y) in clamped.data().iter().enumerate() {
                prop_assert_eq!(codes.bit(0, j), y == 1.0);
            }
        }
    }
}
