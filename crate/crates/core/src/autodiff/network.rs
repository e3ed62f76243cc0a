//! Sequential networks assembled from a declarative layer list.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{AbcParams, BatchNormState, Mode, ScaledTanhParams};
use crate::autodiff::graph::{BatchStats, Gradients, Graph, Var};
use crate::autodiff::kernels::conv2d_output_size;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One entry of an architecture description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    /// Fully connected layer; `out` defaults to the code length.
    Linear {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        out: Option<usize>,
    },
    Conv {
        filters: usize,
        size: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Maxpool {
        window: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        stride: Option<usize>,
    },
    Relu,
    Flatten,
    Batchnorm,
    Abc,
    Tanh,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", bound = "T: Scalar")]
pub enum Layer<T = f32> {
    Linear {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Conv2d {
        kernel: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        window: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    BatchNorm {
        state: BatchNormState<T>,
    },
    Abc {
        params: AbcParams,
    },
    ScaledTanh {
        params: ScaledTanhParams,
    },
}

impl<T: Scalar> Layer<T> {
    fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::Conv2d { kernel, bias, .. } => vec![kernel, bias],
            Layer::BatchNorm { state } => vec![&state.gamma, &state.beta],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Linear { weight, bias } => vec![weight, bias],
            Layer::Conv2d { kernel, bias, .. } => vec![kernel, bias],
            Layer::BatchNorm { state } => vec![&mut state.gamma, &mut state.beta],
            _ => Vec::new(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Linear { .. } => "linear",
            Layer::Conv2d { .. } => "conv",
            Layer::MaxPool { .. } => "maxpool",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::Abc { .. } => "abc",
            Layer::ScaledTanh { .. } => "tanh",
        }
    }

    fn cast<U: Scalar>(&self) -> Layer<U> {
        match self {
            Layer::Linear { weight, bias } => Layer::Linear {
                weight: weight.cast(),
                bias: bias.cast(),
            },
            Layer::Conv2d {
                kernel,
                bias,
                stride,
                pad,
            } => Layer::Conv2d {
                kernel: kernel.cast(),
                bias: bias.cast(),
                stride: *stride,
                pad: *pad,
            },
            Layer::MaxPool { window, stride } => Layer::MaxPool {
                window: *window,
                stride: *stride,
            },
            Layer::Relu => Layer::Relu,
            Layer::Flatten => Layer::Flatten,
            Layer::BatchNorm { state } => Layer::BatchNorm {
                state: state.cast(),
            },
            Layer::Abc { params } => Layer::Abc { params: *params },
            Layer::ScaledTanh { params } => Layer::ScaledTanh { params: *params },
        }
    }
}

/// Batch statistics of the BN layers a pass ran in train mode, by layer index.
type LayerStats<T> = Vec<(usize, BatchStats<T>)>;

/// Nodes recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub output: Var,
    /// Parameter leaves in [`Network::params`] order.
    pub params: Vec<Var>,
    /// Input node of every executed layer.
    pub layer_inputs: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Network<T = f32> {
    /// Per-example input shape (without the batch axis).
    input_shape: Vec<usize>,
    layers: Vec<Layer<T>>,
}

fn xavier<T: Scalar, R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.random_range(-a..a))).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

impl Network<f32> {
    /// Instantiates `specs` for inputs of `input_shape`, with Xavier-uniform
    /// weights and zero biases. `code_bits` is the width of a `linear`
    /// layer without an explicit `out`.
    pub fn build<R: Rng>(
        specs: &[LayerSpec],
        input_shape: &[usize],
        code_bits: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::dim(format!("invalid input shape {input_shape:?}")));
        }
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let bad = |msg: String| Error::dim(format!("layer {i} ({spec:?}): {msg}"));
            let layer = match *spec {
                LayerSpec::Linear { out } => {
                    let out = out.unwrap_or(code_bits);
                    if shape.len() != 1 {
                        return Err(bad(format!(
                            "needs a flat input, got {shape:?}; add a flatten layer"
                        )));
                    }
                    if out == 0 {
                        return Err(bad("zero outputs".into()));
                    }
                    let n = shape[0];
                    shape = vec![out];
                    Layer::Linear {
                        weight: xavier(&[n, out], n, out, rng),
                        bias: Tensor::zeros(&[out]),
                    }
                }
                LayerSpec::Conv {
                    filters,
                    size,
                    stride,
                    pad,
                } => {
                    let [c, h, w] = shape[..] else {
                        return Err(bad(format!("needs a C x H x W input, got {shape:?}")));
                    };
                    let (Some(oh), Some(ow)) = (
                        conv2d_output_size(h, size, stride, pad),
                        conv2d_output_size(w, size, stride, pad),
                    ) else {
                        return Err(bad(format!(
                            "kernel {size} stride {stride} pad {pad} does not fit {shape:?}"
                        )));
                    };
                    if filters == 0 {
                        return Err(bad("zero filters".into()));
                    }
                    shape = vec![filters, oh, ow];
                    Layer::Conv2d {
                        kernel: xavier(
                            &[filters, c, size, size],
                            c * size * size,
                            filters * size * size,
                            rng,
                        ),
                        bias: Tensor::zeros(&[filters]),
                        stride,
                        pad,
                    }
                }
                LayerSpec::Maxpool { window, stride } => {
                    let stride = stride.unwrap_or(window);
                    let [c, h, w] = shape[..] else {
                        return Err(bad(format!("needs a C x H x W input, got {shape:?}")));
                    };
                    if window == 0 || window > h || window > w || stride == 0 {
                        return Err(bad(format!(
                            "window {window} stride {stride} invalid for {shape:?}"
                        )));
                    }
                    shape = vec![c, (h - window) / stride + 1, (w - window) / stride + 1];
                    Layer::MaxPool { window, stride }
                }
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    Layer::Flatten
                }
                LayerSpec::Batchnorm => Layer::BatchNorm {
                    state: BatchNormState::new(shape[0]),
                },
                LayerSpec::Abc => Layer::Abc {
                    params: AbcParams::new(1.0)?,
                },
                LayerSpec::Tanh => Layer::ScaledTanh {
                    params: ScaledTanhParams::new(1.0)?,
                },
            };
            layers.push(layer);
        }
        Ok(Network {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }
}

impl<T: Scalar> Network<T> {
    pub fn from_layers(input_shape: Vec<usize>, layers: Vec<Layer<T>>) -> Self {
        Network {
            input_shape,
            layers,
        }
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    /// Layer index owning each parameter, in [`Network::params`] order.
    pub fn param_owners(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| std::iter::repeat_n(i, l.params().len()))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Tensor::zero_grad);
    }

    /// Sets `r` on every ABC layer.
    pub fn set_abc(&mut self, params: AbcParams) {
        for l in &mut self.layers {
            if let Layer::Abc { params: p } = l {
                *p = params;
            }
        }
    }

    /// Sets `alpha` on every scaled-tanh layer.
    pub fn set_tanh(&mut self, params: ScaledTanhParams) {
        for l in &mut self.layers {
            if let Layer::ScaledTanh { params: p } = l {
                *p = params;
            }
        }
    }

    /// Index of the first ABC or scaled-tanh layer.
    pub fn binarizer_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| matches!(l, Layer::Abc { .. } | Layer::ScaledTanh { .. }))
    }

    /// Layers before the last ABC layer with `r = 0` receive no gradient;
    /// returns that layer's index (0 if there is none).
    pub fn frozen_prefix(&self) -> usize {
        self.layers
            .iter()
            .rposition(|l| matches!(l, Layer::Abc { params } if params.r() == 0.0))
            .unwrap_or(0)
    }

    /// Records a forward pass. Train mode normalizes with batch statistics and
    /// folds them into the running estimates.
    pub fn forward(&mut self, g: &mut Graph<T>, x: Var, mode: Mode) -> Result<ForwardPass> {
        self.forward_frozen(g, x, mode, 0)
    }

    /// As [`Network::forward`], but batch-norm layers before `frozen_before`
    /// keep their running statistics.
    pub fn forward_frozen(
        &mut self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        frozen_before: usize,
    ) -> Result<ForwardPass> {
        let (pass, stats) = self.run(g, x, mode, 0..self.layers.len())?;
        for (idx, s) in stats.into_iter().filter(|(idx, _)| *idx >= frozen_before) {
            if let Layer::BatchNorm { state } = &mut self.layers[idx] {
                state.update_running(&s.mean, &s.var, s.count);
            }
        }
        Ok(pass)
    }

    /// Eval-mode forward through `layers[range]` without touching any state.
    pub fn infer(&self, x: &Tensor<T>, range: Range<usize>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let (pass, _) = self.run(&mut g, v, Mode::Eval, range)?;
        Ok(g.value(pass.output).clone())
    }

    fn run(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        range: Range<usize>,
    ) -> Result<(ForwardPass, LayerStats<T>)> {
        if range.start == 0 && g.value(x).shape()[1..] != self.input_shape[..] {
            return Err(Error::dim(format!(
                "network expects per-example shape {:?}, got batch {:?}",
                self.input_shape,
                g.value(x).shape()
            )));
        }
        let mut cur = x;
        let mut params = Vec::new();
        let mut layer_inputs = Vec::new();
        let mut stats = Vec::new();
        for idx in range {
            let layer = &self.layers[idx];
            layer_inputs.push(cur);
            cur = match layer {
                Layer::Linear { weight, bias } => {
                    let w = g.leaf(weight.clone());
                    let b = g.leaf(bias.clone());
                    params.extend([w, b]);
                    g.linear(cur, w, b)?
                }
                Layer::Conv2d {
                    kernel,
                    bias,
                    stride,
                    pad,
                } => {
                    let k = g.leaf(kernel.clone());
                    let b = g.leaf(bias.clone());
                    params.extend([k, b]);
                    g.conv2d(cur, k, Some(b), *stride, *pad)?
                }
                Layer::MaxPool { window, stride } => g.maxpool(cur, *window, *stride)?,
                Layer::Relu => g.relu(cur),
                Layer::Flatten => g.flatten(cur)?,
                Layer::BatchNorm { state } => {
                    let gamma = g.leaf(state.gamma.clone());
                    let beta = g.leaf(state.beta.clone());
                    params.extend([gamma, beta]);
                    match mode {
                        Mode::Train => {
                            let (v, s) = g.batch_norm_train(cur, gamma, beta, state.eps)?;
                            stats.push((idx, s));
                            v
                        }
                        Mode::Eval => g.batch_norm_eval(
                            cur,
                            gamma,
                            beta,
                            &state.running_mean,
                            &state.running_var,
                            state.eps,
                        )?,
                    }
                }
                Layer::Abc { params: p } => g.abc(cur, *p),
                Layer::ScaledTanh { params: p } => g.scaled_tanh(cur, *p),
            };
        }
        Ok((
            ForwardPass {
                output: cur,
                params,
                layer_inputs,
            },
            stats,
        ))
    }

    /// Adds the gradients of a full forward pass into each parameter's buffer.
    pub fn accumulate_grads(&mut self, pass: &ForwardPass, grads: &Gradients<T>) -> Result<()> {
        let params = self.params_mut();
        if params.len() != pass.params.len() {
            return Err(Error::State(format!(
                "forward pass recorded {} parameters, network has {}",
                pass.params.len(),
                params.len()
            )));
        }
        for (p, &v) in params.into_iter().zip(&pass.params) {
            match grads.get(v) {
                Some(g) => p.accumulate_grad(g)?,
                None => p.accumulate_grad(&vec![T::zero(); p.len()])?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mlp() -> Network<f32> {
        let specs = [
            LayerSpec::Linear { out: Some(8) },
            LayerSpec::Relu,
            LayerSpec::Linear { out: None },
            LayerSpec::Batchnorm,
            LayerSpec::Abc,
        ];
        Network::build(&specs, &[5], 4, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn build_infers_shapes() {
        let specs = [
            LayerSpec::Conv {
                filters: 4,
                size: 3,
                stride: 1,
                pad: 1,
            },
            LayerSpec::Maxpool {
                window: 2,
                stride: None,
            },
            LayerSpec::Flatten,
            LayerSpec::Linear { out: None },
        ];
        let net =
            Network::build(&specs, &[3, 8, 8], 12, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = net.infer(&Tensor::zeros(&[2, 3, 8, 8]), 0..4).unwrap();
        assert_eq!(out.shape(), &[2, 12]);
        assert_eq!(net.params().len(), 4);

        let no_flatten = [
            LayerSpec::Conv {
                filters: 1,
                size: 3,
                stride: 1,
                pad: 0,
            },
            LayerSpec::Linear { out: None },
        ];
        assert!(Network::build(
            &no_flatten,
            &[1, 4, 4],
            2,
            &mut ChaCha8Rng::seed_from_u64(0)
        )
        .is_err());
    }

    #[test]
    fn xavier_bounds() {
        let net = mlp();
        let a = (6.0f32 / 13.0).sqrt();
        assert!(net.params()[0].data().iter().all(|v| v.abs() <= a));
        assert!(net.params()[1].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_accumulates_without_zeroing() {
        let mut net = mlp();
        let x = Tensor::new(
            vec![3, 5],
            (0..15).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap();
        let mut once = None;
        for _ in 0..2 {
            let mut g = Graph::new();
            let v = g.leaf(x.clone());
            let pass = net.forward(&mut g, v, Mode::Train).unwrap();
            let loss = g.sum(pass.output);
            let grads = g.backward(loss).unwrap();
            net.accumulate_grads(&pass, &grads).unwrap();
            if once.is_none() {
                once = Some(net.params()[0].grad().unwrap().to_vec());
            }
        }
        let once = once.unwrap();
        let twice = net.params()[0].grad().unwrap();
        for (a, b) in once.iter().zip(twice) {
            assert!((2.0 * a - b).abs() <= 1e-6 * (1.0 + a.abs()));
        }
        net.zero_grad();
        assert!(net.params()[0].grad().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_prefix_tracks_clamped_abc() {
        let mut net = mlp();
        assert_eq!(net.frozen_prefix(), 0);
        net.set_abc(AbcParams::new(0.0).unwrap());
        assert_eq!(net.frozen_prefix(), 4);
        assert_eq!(net.binarizer_index(), Some(4));
    }

    #[test]
    fn forward_is_deterministic_and_serializable() {
        let net = mlp();
        let x = Tensor::new(
            vec![2, 5],
            vec![0.1, -0.2, 0.3, 0.5, -0.9, 1.0, 0.0, 0.4, -0.4, 0.2],
        )
        .unwrap();
        let a = net.infer(&x, 0..5).unwrap();
        let b = net.infer(&x, 0..5).unwrap();
        assert_eq!(a, b);
        let json = serde_json::to_string(&net).unwrap();
        let back: Network<f32> = serde_json::from_str(&json).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.infer(&x, 0..5).unwrap(), a);
    }
}
