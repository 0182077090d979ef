//! Reverse-mode autodiff tape for feed-forward networks.
//!
//! Every recorded operation appends one node holding the context its
//! backward rule needs (im2col buffers, ReLU masks, pooling indices).
//! [`Tape::backward`] replays the nodes in exact reverse order and sums
//! cotangents for values consumed more than once.

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::ops::{self, ConvGeometry, PoolKind, Pooled};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        cols: Vec<f32>,
        scale: f32,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        scale: f32,
    },
    Relu {
        input: Var,
        mask: Vec<bool>,
    },
    Pool {
        input: Var,
        pooled: Pooled,
    },
    Reshape {
        input: Var,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Result of one backward replay.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
    visit_order: Vec<usize>,
}

impl Gradients {
    /// Gradient of a named parameter; zero if the output does not depend on it.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.grads[v.0].as_ref())
    }

    /// Gradient of any recorded value that required one.
    pub fn of(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn into_params(mut self) -> BTreeMap<String, Tensor> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(name, v)| self.grads[v.0].take().map(|g| (name, g)))
            .collect()
    }

    /// Node indices in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded non-leaf operations.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Leaf))
            .count()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A non-parameter leaf such as the network input.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// A named trainable leaf. Names must be unique on one tape.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::State(format!("parameter {name} recorded twice")));
        }
        let v = self.push(Op::Leaf, value, true);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        scale: f32,
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let geom = ConvGeometry::new(x.shape(), w.shape(), stride, pad)?;
        let cols = ops::im2col(x, &geom);
        let out = ops::conv_from_cols(&cols, w, bias.map(|b| self.value(b)), scale, &geom)?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Op::Conv {
                input,
                weight,
                bias,
                geom,
                cols,
                scale,
            },
            out,
            needs,
        ))
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Option<Var>, scale: f32) -> Result<Var> {
        let out = ops::dense_scaled(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            scale,
        )?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
                scale,
            },
            out,
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let (out, mask) = ops::relu(self.value(input));
        let needs = self.needs(input);
        self.push(Op::Relu { input, mask }, out, needs)
    }

    pub fn pool(&mut self, input: Var, kind: PoolKind, window: usize, stride: usize) -> Result<Var> {
        let mut pooled = ops::pool(self.value(input), kind, window, stride)?;
        let out = std::mem::replace(&mut pooled.output, Tensor::scalar(0.0));
        let needs = self.needs(input);
        Ok(self.push(Op::Pool { input, pooled }, out, needs))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let n = x.dim(0);
        let rest = x.numel() / n;
        let out = x.clone().reshape(&[n, rest])?;
        let needs = self.needs(input);
        Ok(self.push(Op::Reshape { input }, out, needs))
    }

    /// Reverse-mode sweep from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.op_count() == 0 {
            return Err(Error::State("backward called on an empty tape".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(Error::State(format!("unknown output {output:?}")));
        }
        if seed.shape() != self.value(output).shape() {
            return dim_err(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape(),
                self.value(output).shape()
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());
        let mut visit_order = Vec::new();

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            visit_order.push(idx);
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv {
                    input,
                    weight,
                    bias,
                    geom,
                    cols,
                    scale,
                } => {
                    if self.needs(*weight) {
                        accumulate(&mut grads, *weight, ops::conv2d_weight_grad(cols, &gy, geom, *scale))?;
                    }
                    if let Some(b) = bias.filter(|b| self.needs(*b)) {
                        accumulate(&mut grads, b, ops::conv2d_bias_grad(&gy)?)?;
                    }
                    if self.needs(*input) {
                        let w = self.value(*weight);
                        accumulate(&mut grads, *input, ops::conv2d_input_grad(&gy, w, geom, *scale))?;
                    }
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                    scale,
                } => {
                    if self.needs(*weight) {
                        let g = ops::dense_weight_grad(self.value(*input), &gy, *scale)?;
                        accumulate(&mut grads, *weight, g)?;
                    }
                    if let Some(b) = bias.filter(|b| self.needs(*b)) {
                        accumulate(&mut grads, b, ops::dense_bias_grad(&gy)?)?;
                    }
                    if self.needs(*input) {
                        let g = ops::dense_input_grad(&gy, self.value(*weight), *scale)?;
                        accumulate(&mut grads, *input, g)?;
                    }
                }
                Op::Relu { input, mask } => {
                    accumulate(&mut grads, *input, ops::apply_mask(&gy, mask))?;
                }
                Op::Pool { input, pooled } => {
                    accumulate(&mut grads, *input, ops::pool_backward(&gy, pooled)?)?;
                }
                Op::Reshape { input } => {
                    let shape = self.value(*input).shape().to_vec();
                    accumulate(&mut grads, *input, gy.reshape(&shape)?)?;
                }
            }
        }

        for v in self.params.values() {
            if grads[v.0].is_none() {
                grads[v.0] = Some(Tensor::zeros(self.value(*v).shape()));
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
            visit_order,
        })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
