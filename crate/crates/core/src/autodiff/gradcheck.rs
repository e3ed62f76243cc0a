//! Central-difference verification of analytic gradients.
//!
//! The discrepancy for one coordinate is
//! `|analytic - numeric| / max(1, |analytic|)` and a check reports the
//! maximum over all coordinates. Run on a `Network<f64>` (via
//! [`Network::cast`]) for tight tolerances.

use crate::activations::Mode;
use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::network::{Layer, Network};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter coordinates compared against finite differences.
    pub checked: usize,
    /// Coordinates in front of an ABC layer with `r = 0`, not perturbed.
    pub skipped: usize,
    /// Largest analytic gradient magnitude among the skipped coordinates.
    pub max_skipped_grad: f64,
    /// Smallest `|x|` seen at an ABC or ReLU input at the base point.
    pub min_kink_margin: f64,
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(1.0)
}

/// Fixed, non-degenerate weights for reducing a network output to a scalar.
fn probe<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| T::lit((1.7 * i as f64 + 0.3).cos()))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("probe shape mirrors a valid tensor")
}

fn probed_loss<T: Scalar>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    weights: Option<&Tensor<T>>,
) -> Result<(Graph<T>, Var, crate::autodiff::ForwardPass)> {
    let mut g = Graph::new();
    let x = g.leaf(input.clone());
    let pass = net.forward(&mut g, x, Mode::Train)?;
    let w = match weights {
        Some(w) => w.clone(),
        None => probe(g.value(pass.output).shape()),
    };
    let w = g.leaf(w);
    let prod = g.mul(pass.output, w)?;
    let loss = g.sum(prod);
    Ok((g, loss, pass))
}

/// Compares backpropagated parameter gradients of `network` (train mode, loss
/// = probe-weighted sum of the output) with central differences of step `eps`.
pub fn gradient_check<T: Scalar>(
    network: &Network<T>,
    input: &Tensor<T>,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::param(format!(
            "finite-difference step must be > 0, got {eps}"
        )));
    }
    let mut net = network.clone();
    net.zero_grad();
    let (g, loss, pass) = probed_loss(&mut net, input, None)?;
    let weights = probe::<T>(g.value(pass.output).shape());
    let grads = g.backward(loss)?;
    net.accumulate_grads(&pass, &grads)?;

    let mut min_kink_margin = f64::INFINITY;
    for (layer, &v) in net.layers().iter().zip(&pass.layer_inputs) {
        if matches!(layer, Layer::Abc { .. } | Layer::Relu) {
            for &x in g.value(v).data() {
                min_kink_margin = min_kink_margin.min(x.as_f64().abs());
            }
        }
    }

    let analytic: Vec<Vec<f64>> = net
        .params()
        .iter()
        .map(|p| p.grad().unwrap_or(&[]).iter().map(|v| v.as_f64()).collect())
        .collect();
    let owners = net.param_owners();
    let frozen = net.frozen_prefix();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
        max_skipped_grad: 0.0,
        min_kink_margin,
    };
    for (p, grad) in analytic.iter().enumerate() {
        if owners[p] < frozen {
            report.skipped += grad.len();
            for &a in grad {
                report.max_skipped_grad = report.max_skipped_grad.max(a.abs());
            }
            continue;
        }
        for (j, &a) in grad.iter().enumerate() {
            let orig = net.params()[p].data()[j];
            let up = orig + T::lit(eps);
            let down = orig - T::lit(eps);
            net.params_mut()[p].data_mut()[j] = up;
            let (gu, lu, _) = probed_loss(&mut net, input, Some(&weights))?;
            net.params_mut()[p].data_mut()[j] = down;
            let (gd, ld, _) = probed_loss(&mut net, input, Some(&weights))?;
            net.params_mut()[p].data_mut()[j] = orig;
            let numeric = (gu.value(lu).data()[0].as_f64() - gd.value(ld).data()[0].as_f64())
                / (up.as_f64() - down.as_f64());
            report.max_rel_error = report.max_rel_error.max(rel_error(a, numeric));
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Checks the gradient of a scalar-valued graph function with respect to
/// every input tensor. Returns the maximum relative discrepancy.
pub fn check_function<F>(inputs: &[Tensor<f64>], eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (g, vars, out) = eval(inputs)?;
    let grads = g.backward(out)?;
    let mut work = inputs.to_vec();
    let mut worst = 0.0f64;
    for (t, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[t].len()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = work[t].data()[j];
            work[t].data_mut()[j] = orig + eps;
            let (gu, _, lu) = eval(&work)?;
            work[t].data_mut()[j] = orig - eps;
            let (gd, _, ld) = eval(&work)?;
            work[t].data_mut()[j] = orig;
            let numeric = (gu.value(lu).data()[0] - gd.value(ld).data()[0]) / (2.0 * eps);
            worst = worst.max(rel_error(a, numeric));
        }
    }
    Ok(worst)
}
