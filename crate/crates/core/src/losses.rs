//! Contrastive pair loss with a binarization regularizer, and softmax
//! cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Outputs of the two branches for `B` pairs plus their similarity flags.
/// `similar[i] == true` means pair `i` should be pulled together.
#[derive(Clone, Debug)]
pub struct PairBatch<T = f32> {
    pub left: Tensor<T>,
    pub right: Tensor<T>,
    pub similar: Vec<bool>,
}

impl<T: Scalar> PairBatch<T> {
    pub fn new(left: Tensor<T>, right: Tensor<T>, similar: Vec<bool>) -> Result<Self> {
        check_pair_shapes(&left, &right, &similar)?;
        Ok(PairBatch {
            left,
            right,
            similar,
        })
    }

    pub fn loss(&self, margin: f64, reg_weight: f64) -> Result<PairwiseLossOutput<T>> {
        pairwise_loss(&self.left, &self.right, &self.similar, margin, reg_weight)
    }
}

fn check_pair_shapes<T: Scalar>(
    left: &Tensor<T>,
    right: &Tensor<T>,
    similar: &[bool],
) -> Result<()> {
    left.same_shape(right)?;
    if left.rank() != 2 || similar.len() != left.rows() {
        return Err(Error::dim(format!(
            "pair batch of shape {:?} with {} similarity flags",
            left.shape(),
            similar.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct PairwiseLossOutput<T> {
    pub loss: T,
    pub grad_left: Vec<T>,
    pub grad_right: Vec<T>,
}

#[inline]
fn sign<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// Mean over pairs of
///
/// ```text
/// 1/2 s |b1 - b2|^2 + 1/2 (1 - s) max(0, m - |b1 - b2|^2)
///     + w (| |b1| - 1 |_1 + | |b2| - 1 |_1)
/// ```
///
/// with subgradient 0 on the hinge boundary and at the `|b| = 1` and `b = 0`
/// kinks of the regularizer.
pub fn pairwise_loss<T: Scalar>(
    left: &Tensor<T>,
    right: &Tensor<T>,
    similar: &[bool],
    margin: f64,
    reg_weight: f64,
) -> Result<PairwiseLossOutput<T>> {
    if !(margin > 0.0) {
        return Err(Error::param(format!("margin must be > 0, got {margin}")));
    }
    if !(reg_weight >= 0.0) {
        return Err(Error::param(format!(
            "regularizer weight must be >= 0, got {reg_weight}"
        )));
    }
    check_pair_shapes(left, right, similar)?;
    let (batch, k) = (left.shape()[0], left.shape()[1]);
    let (m, w) = (T::lit(margin), T::lit(reg_weight));
    let half = T::lit(0.5);
    let scale = T::one() / T::lit(batch as f64);
    let mut total = T::zero();
    let mut gl = vec![T::zero(); left.len()];
    let mut gr = vec![T::zero(); right.len()];
    for (i, &sim) in similar.iter().enumerate() {
        let (b1, b2) = (left.row(i), right.row(i));
        let dist2: T = b1.iter().zip(b2).map(|(&p, &q)| (p - q) * (p - q)).sum();
        // d loss / d (b1 - b2)
        let coeff = if sim {
            total = total + half * dist2;
            T::one()
        } else if dist2 < m {
            total = total + half * (m - dist2);
            -T::one()
        } else {
            T::zero()
        };
        for j in 0..k {
            let d = b1[j] - b2[j];
            gl[i * k + j] = coeff * d;
            gr[i * k + j] = -coeff * d;
        }
        if reg_weight > 0.0 {
            for j in 0..k {
                let (p, q) = (b1[j], b2[j]);
                total = total + w * ((p.abs() - T::one()).abs() + (q.abs() - T::one()).abs());
                gl[i * k + j] = gl[i * k + j] + w * sign(p) * sign(p.abs() - T::one());
                gr[i * k + j] = gr[i * k + j] + w * sign(q) * sign(q.abs() - T::one());
            }
        }
    }
    gl.iter_mut()
        .chain(gr.iter_mut())
        .for_each(|g| *g = *g * scale);
    Ok(PairwiseLossOutput {
        loss: total * scale,
        grad_left: gl,
        grad_right: gr,
    })
}

#[derive(Clone, Debug)]
pub struct SoftmaxOutput<T> {
    pub loss: T,
    pub grad: Vec<T>,
}

/// Mean negative log-softmax of the true class, stabilized by subtracting
/// the row maximum.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<SoftmaxOutput<T>> {
    if logits.rank() != 2 || labels.len() != logits.rows() {
        return Err(Error::dim(format!(
            "logits {:?} with {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::data(format!(
            "label {l} of example {i} outside [0, {classes})"
        )));
    }
    let scale = T::one() / T::lit(batch as f64);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(logits.len());
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let z: T = exps.iter().copied().sum();
        total = total + z.ln() - (row[label] - max);
        for (c, &e) in exps.iter().enumerate() {
            let p = e / z;
            let target = if c == label { T::one() } else { T::zero() };
            grad.push((p - target) * scale);
        }
    }
    Ok(SoftmaxOutput {
        loss: total * scale,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rows(v: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(v).unwrap()
    }

    /// Straight-line reference written per pair without shared helpers.
    fn reference(
        left: &[Vec<f64>],
        right: &[Vec<f64>],
        sim: &[bool],
        m: f64,
        w: f64,
    ) -> (f64, Vec<f64>, Vec<f64>) {
        let b = left.len() as f64;
        let mut loss = 0.0;
        let (mut gl, mut gr) = (vec![], vec![]);
        for i in 0..left.len() {
            let mut d2 = 0.0;
            for j in 0..left[i].len() {
                d2 += (left[i][j] - right[i][j]).powi(2);
            }
            let mut pair = if sim[i] {
                0.5 * d2
            } else {
                0.5 * (m - d2).max(0.0)
            };
            for j in 0..left[i].len() {
                pair += w * ((left[i][j].abs() - 1.0).abs() + (right[i][j].abs() - 1.0).abs());
            }
            loss += pair / b;
            for j in 0..left[i].len() {
                let d = left[i][j] - right[i][j];
                let c = if sim[i] {
                    d
                } else if d2 < m {
                    -d
                } else {
                    0.0
                };
                let r1 = w * left[i][j].signum() * (left[i][j].abs() - 1.0).signum();
                let r2 = w * right[i][j].signum() * (right[i][j].abs() - 1.0).signum();
                gl.push((c + r1) / b);
                gr.push((-c + r2) / b);
            }
        }
        (loss, gl, gr)
    }

    #[test]
    fn identical_similar_codes_cost_nothing() {
        let a = rows(&[vec![1.0, -1.0, 1.0]]);
        let out = pairwise_loss(&a, &a, &[true], 6.0, 0.0).unwrap();
        assert_eq!(out.loss, 0.0);
    }

    #[test]
    fn saturated_hinge_is_zero() {
        let a = rows(&[vec![1.0, 1.0]]);
        let b = rows(&[vec![-1.0, -1.0]]);
        let out = pairwise_loss(&a, &b, &[false], 4.0, 0.0).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_left.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let a = rows(&[vec![1.0]]);
        assert!(matches!(
            pairwise_loss(&a, &a, &[true], 0.0, 0.0),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            pairwise_loss(&a, &a, &[true], 1.0, -0.1),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            pairwise_loss(&a, &a, &[true, false], 1.0, 0.0),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn matches_straight_line_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let l: Vec<Vec<f64>> = (0..16)
                .map(|_| (0..12).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let r: Vec<Vec<f64>> = (0..16)
                .map(|_| (0..12).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let s: Vec<bool> = (0..16).map(|_| rng.random()).collect();
            let out = pairwise_loss(&rows(&l), &rows(&r), &s, 24.0, 0.01).unwrap();
            let (loss, gl, gr) = reference(&l, &r, &s, 24.0, 0.01);
            assert!((out.loss - loss).abs() <= 1e-6);
            for (a, b) in out
                .grad_left
                .iter()
                .zip(&gl)
                .chain(out.grad_right.iter().zip(&gr))
            {
                assert!((a - b).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn regularizer_gradient_at_kink_is_zero() {
        let a = rows(&[vec![1.0, -1.0, 0.0]]);
        let out = pairwise_loss(&a, &a, &[true], 1.0, 0.5).unwrap();
        assert_eq!(out.grad_left, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let eps = 1e-6;
        for _ in 0..20 {
            let mut l: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let r: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            let s = vec![true, false, true, false];
            let out = pairwise_loss(&rows(&l), &rows(&r), &s, 12.0, 0.01).unwrap();
            for i in 0..4 {
                for j in 0..6 {
                    let v = l[i][j];
                    if v.abs() < 1e-3 || (v.abs() - 1.0).abs() < 1e-3 {
                        continue;
                    }
                    l[i][j] = v + eps;
                    let up = pairwise_loss(&rows(&l), &rows(&r), &s, 12.0, 0.01)
                        .unwrap()
                        .loss;
                    l[i][j] = v - eps;
                    let down = pairwise_loss(&rows(&l), &rows(&r), &s, 12.0, 0.01)
                        .unwrap()
                        .loss;
                    l[i][j] = v;
                    let numeric = (up - down) / (2.0 * eps);
                    assert!((numeric - out.grad_left[i * 6 + j]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn softmax_examples() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let out = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);

        let confident = rows(&[vec![1000.0, 0.0, 0.0]]);
        assert!(softmax_cross_entropy(&confident, &[0]).unwrap().loss < 1e-12);
        assert!(matches!(
            softmax_cross_entropy(&confident, &[3]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn softmax_matches_reference_and_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let l: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..5).map(|_| rng.random_range(-4.0..4.0)).collect())
            .collect();
        let labels: Vec<usize> = (0..8).map(|i| i % 5).collect();
        let out = softmax_cross_entropy(&rows(&l), &labels).unwrap();
        let mut expect = 0.0;
        for (row, &y) in l.iter().zip(&labels) {
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[y].exp() / z).ln() / 8.0;
        }
        assert!((out.loss - expect).abs() <= 1e-6);
        for i in 0..8 {
            let s: f64 = out.grad[i * 5..(i + 1) * 5].iter().sum();
            assert!(s.abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn loss_is_non_negative_and_symmetric(
            vals in prop::collection::vec(-3.0f64..3.0, 24),
            flags in prop::collection::vec(any::<bool>(), 2),
            m in 0.1f64..10.0,
            w in 0.0f64..0.1,
        ) {
            let l = Tensor::new(vec![2, 6], vals[..12].to_vec()).unwrap();
            let r = Tensor::new(vec![2, 6], vals[12..].to_vec()).unwrap();
            let a = pairwise_loss(&l, &r, &flags, m, w).unwrap();
            let b = pairwise_loss(&r, &l, &flags, m, w).unwrap();
            prop_assert!(a.loss >= 0.0);
            prop_assert!((a.loss - b.loss).abs() < 1e-12);
            prop_assert_eq!(&a.grad_left, &b.grad_right);
            prop_assert_eq!(&a.grad_right, &b.grad_left);
        }
    }
}
