//! Define-by-run computation graph.
//!
//! Each forward call appends a node holding its output value; inputs always
//! have smaller ids than the node consuming them, so walking the node list
//! backwards is a valid reverse topological order.

use crate::activations::{
    abc, batchnorm_backward, batchnorm_eval_kernel, batchnorm_train_kernel, inv_std_of, AbcParams,
    ScaledTanhParams,
};
use crate::autodiff::kernels;
use crate::error::{Error, Result};
use crate::losses;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    Abc {
        x: Var,
        r: f64,
    },
    ScaledTanh {
        x: Var,
        alpha: f64,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Reshape {
        x: Var,
    },
    Rows {
        x: Var,
        start: usize,
    },
    Sum {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    /// Loss whose input gradients were computed in the forward kernel.
    Loss {
        inputs: Vec<(Var, Vec<T>)>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Batch statistics produced by a train-mode normalization node.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

#[derive(Debug, Default)]
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(kernel),
            bias.map(|b| self.value(b)),
            stride,
            pad,
        )?;
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            },
        ))
    }

    pub fn maxpool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let (out, argmax) = kernels::maxpool_forward(self.value(x), window, stride)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu_forward(self.value(x));
        self.push(out, Op::Relu { x })
    }

    pub fn abc(&mut self, x: Var, params: AbcParams) -> Var {
        let r = T::lit(params.r());
        let out = self.value(x).map(|v| abc(v, r));
        self.push(out, Op::Abc { x, r: params.r() })
    }

    pub fn scaled_tanh(&mut self, x: Var, params: ScaledTanhParams) -> Var {
        let a = T::lit(params.alpha());
        let out = self.value(x).map(|v| (a * v).tanh());
        self.push(
            out,
            Op::ScaledTanh {
                x,
                alpha: params.alpha(),
            },
        )
    }

    /// Normalizes with the batch's own statistics and returns them so the
    /// caller can update its running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats<T>)> {
        let k = batchnorm_train_kernel(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let stats = BatchStats {
            mean: k.mean,
            var: k.var,
            count: k.count,
        };
        let v = self.push(
            k.output,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized: k.normalized,
                inv_std: k.inv_std,
                batch_stats: true,
            },
        );
        Ok((v, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let inv_std = inv_std_of(var, eps);
        let (out, normalized) = batchnorm_eval_kernel(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mean,
            &inv_std,
        )?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats: false,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Collapses everything after the batch axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = vec![t.rows(), t.row_len()];
        self.reshape(x, shape)
    }

    /// Rows `start..end` along the leading axis.
    pub fn rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        if start >= end || end > t.rows() {
            return Err(Error::dim(format!(
                "row range {start}..{end} out of bounds for {:?}",
                t.shape()
            )));
        }
        let n = t.row_len();
        let mut shape = t.shape().to_vec();
        shape[0] = end - start;
        let out = Tensor::from_parts(shape, t.data()[start * n..end * n].to_vec());
        Ok(self.push(out, Op::Rows { x, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&p, &q)| p + q)
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb)?;
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    /// Mean contrastive pair loss; see [`losses::pairwise_loss`].
    pub fn pairwise_loss(
        &mut self,
        left: Var,
        right: Var,
        similar: &[bool],
        margin: f64,
        reg_weight: f64,
    ) -> Result<Var> {
        let out = losses::pairwise_loss(
            self.value(left),
            self.value(right),
            similar,
            margin,
            reg_weight,
        )?;
        Ok(self.push(
            Tensor::scalar(out.loss),
            Op::Loss {
                inputs: vec![(left, out.grad_left), (right, out.grad_right)],
            },
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let out = losses::softmax_cross_entropy(self.value(logits), labels)?;
        Ok(self.push(
            Tensor::scalar(out.loss),
            Op::Loss {
                inputs: vec![(logits, out.grad)],
            },
        ))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::State(format!(
                "backward from node {} but the forward pass recorded only {} nodes",
                loss.0,
                self.nodes.len()
            )));
        };
        if node.value.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut add = |v: Var, delta: Vec<T>| {
            debug_assert_eq!(delta.len(), self.nodes[v.0].value.len());
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(delta).for_each(|(a, d)| *a = *a + d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (gx, gw, gb) = kernels::linear_backward(self.value(*x), self.value(*w), g);
                add(*x, gx);
                add(*w, gw);
                add(*b, gb);
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                stride,
                pad,
            } => {
                let (gx, gk, gb) = kernels::conv2d_backward(
                    self.value(*x),
                    self.value(*kernel),
                    g,
                    *stride,
                    *pad,
                )?;
                add(*x, gx);
                add(*kernel, gk);
                if let Some(b) = bias {
                    add(*b, gb);
                }
            }
            Op::MaxPool { x, argmax } => {
                add(
                    *x,
                    kernels::maxpool_backward(self.value(*x).len(), argmax, g),
                );
            }
            Op::Relu { x } => add(*x, kernels::relu_backward(self.value(*x), g)),
            Op::Abc { x, r } => {
                let r = T::lit(*r);
                add(*x, g.iter().map(|&v| v * r).collect());
            }
            Op::ScaledTanh { x, alpha } => {
                let a = T::lit(*alpha);
                let delta = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(&gv, &y)| gv * a * (T::one() - y * y))
                    .collect();
                add(*x, delta);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
                batch_stats,
            } => {
                let (gx, gg, gb) = batchnorm_backward(
                    self.value(*x).shape(),
                    g,
                    normalized,
                    inv_std,
                    self.value(*gamma),
                    *batch_stats,
                );
                add(*x, gx);
                add(*gamma, gg);
                add(*beta, gb);
            }
            Op::Reshape { x } => add(*x, g.to_vec()),
            Op::Rows { x, start } => {
                let src = self.value(*x);
                let n = src.row_len();
                let mut delta = vec![T::zero(); src.len()];
                delta[start * n..start * n + g.len()].copy_from_slice(g);
                add(*x, delta);
            }
            Op::Sum { x } => add(*x, vec![g[0]; self.value(*x).len()]),
            Op::Add { a, b } => {
                add(*a, g.to_vec());
                add(*b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                add(
                    *a,
                    g.iter().zip(tb.data()).map(|(&gv, &q)| gv * q).collect(),
                );
                add(
                    *b,
                    g.iter().zip(ta.data()).map(|(&gv, &p)| gv * p).collect(),
                );
            }
            Op::Loss { inputs } => {
                for (v, local) in inputs {
                    add(*v, local.iter().map(|&l| l * g[0]).collect());
                }
            }
        }
        Ok(())
    }
}
