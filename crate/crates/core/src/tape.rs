//! Reverse-mode differentiation over a linear record of kernel calls.
//!
//! A [`Tape`] borrows convolution parameters for its lifetime, records every
//! forward operation with its output value, and replays the record backwards
//! in [`Tape::backward`]. Values that feed several consumers accumulate their
//! gradients.

use crate::error::{Error, Result};
use crate::losses::{self, GroundTruth};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{ConvParams, Tensor};

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a registered parameter block, numbered in registration order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<'p, T> {
    Input,
    Conv { input: Var, param: ParamId },
    Relu(Var),
    Scale(Var, T),
    Concat(Var, Var),
    Add(Var, Var),
    Resize(Var),
    Softmax(Var),
    Sum(Var),
    DepthLoss { pred: Var, gt: &'p GroundTruth<T> },
    SemanticLoss { logits: Var, gt: &'p GroundTruth<T> },
}

struct Node<'p, T> {
    value: Tensor<T>,
    op: Op<'p, T>,
}

pub struct Tape<'p, T> {
    nodes: Vec<Node<'p, T>>,
    params: Vec<&'p ConvParams<T>>,
}

/// Result of [`Tape::backward`]: gradients of inputs and parameter blocks.
#[derive(Debug)]
pub struct Gradients<T> {
    inputs: Vec<Option<Tensor<T>>>,
    params: Vec<ConvParams<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a value created with [`Tape::input`]; `None` if the
    /// output does not depend on it.
    pub fn input(&self, var: Var) -> Option<&Tensor<T>> {
        self.inputs.get(var.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> &ConvParams<T> {
        &self.params[id.0]
    }

    /// Parameter gradients in registration order.
    pub fn params(&self) -> &[ConvParams<T>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<ConvParams<T>> {
        self.params
    }
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<'p, T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node<'p, T>> {
        self.nodes.get(v.0).ok_or_else(|| Error::Usage(format!("variable {} is not recorded on this tape", v.0)))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.node(v)?.value)
    }

    /// Records a leaf value whose gradient is reported by `backward`.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, params: &'p ConvParams<T>) -> ParamId {
        self.params.push(params);
        ParamId(self.params.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, param: ParamId) -> Result<Var> {
        let p = *self
            .params
            .get(param.0)
            .ok_or_else(|| Error::Usage(format!("parameter {} is not registered", param.0)))?;
        let out = ops::conv2d(self.value(input)?, p)?;
        Ok(self.push(out, Op::Conv { input, param }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let out = ops::relu(self.value(input)?);
        Ok(self.push(out, Op::Relu(input)))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let out = self.value(input)?.map(|v| v * factor);
        Ok(self.push(out, Op::Scale(input, factor)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::concat_channels(self.value(a)?, self.value(b)?)?;
        Ok(self.push(out, Op::Concat(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add_elementwise(self.value(a)?, self.value(b)?)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn resize_bilinear(&mut self, input: Var, height: usize, width: usize) -> Result<Var> {
        let out = ops::resize_bilinear(self.value(input)?, height, width)?;
        Ok(self.push(out, Op::Resize(input)))
    }

    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let out = ops::softmax_channels(self.value(input)?);
        Ok(self.push(out, Op::Softmax(input)))
    }

    /// Sum of all entries as a 1×1×1 value.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s = self.value(input)?.sum();
        Ok(self.push(Tensor::scalar(T::narrow(s)), Op::Sum(input)))
    }

    pub fn depth_loss(&mut self, pred: Var, gt: &'p GroundTruth<T>) -> Result<Var> {
        let l = losses::depth_loss(self.value(pred)?, gt)?;
        Ok(self.push(Tensor::scalar(T::narrow(l)), Op::DepthLoss { pred, gt }))
    }

    pub fn semantic_loss(&mut self, logits: Var, gt: &'p GroundTruth<T>) -> Result<Var> {
        let l = losses::semantic_loss(self.value(logits)?, gt)?;
        Ok(self.push(Tensor::scalar(T::narrow(l)), Op::SemanticLoss { logits, gt }))
    }

    /// Back-propagates `upstream` (shaped like `output`'s value) through
    /// every operation recorded up to and including `output`.
    pub fn backward(&self, output: Var, upstream: Tensor<T>) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called before any forward operation".into()));
        }
        let out_shape = self.node(output)?.value.shape();
        if upstream.shape() != out_shape {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                out_shape
            )));
        }

        let mut grads: Vec<Option<Tensor<T>>> = (0..=output.0).map(|_| None).collect();
        let mut param_grads: Vec<ConvParams<T>> = self.params.iter().map(|p| ConvParams::zeros_like(p)).collect();
        grads[output.0] = Some(upstream);

        fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
            match slot {
                Some(existing) => existing.add_assign(&g),
                None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match node.op {
                Op::Input => unreachable!(),
                Op::Conv { input, param } => {
                    let x = &self.nodes[input.0].value;
                    let (gx, gp) = ops::conv2d_backward(x, self.params[param.0], &g)?;
                    accumulate_params(&mut param_grads[param.0], &gp);
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Relu(input) => {
                    let gx = ops::relu_backward(&self.nodes[input.0].value, &g);
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Scale(input, factor) => {
                    accumulate(&mut grads[input.0], g.map(|v| v * factor));
                }
                Op::Concat(a, b) => {
                    let (ga, gb) = ops::concat_backward(&g, self.nodes[a.0].value.channels())?;
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Resize(input) => {
                    let x = &self.nodes[input.0].value;
                    let gx = ops::resize_bilinear_backward(&g, x.height(), x.width());
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Softmax(input) => {
                    let gx = ops::softmax_backward(&node.value, &g);
                    accumulate(&mut grads[input.0], gx);
                }
                Op::Sum(input) => {
                    let x = &self.nodes[input.0].value;
                    accumulate(&mut grads[input.0], Tensor::full(x.channels(), x.height(), x.width(), g.data()[0]));
                }
                Op::DepthLoss { pred, gt } => {
                    let gx = losses::depth_loss_grad(&self.nodes[pred.0].value, gt, g.data()[0].widen())?;
                    accumulate(&mut grads[pred.0], gx);
                }
                Op::SemanticLoss { logits, gt } => {
                    let gx = losses::semantic_loss_grad(&self.nodes[logits.0].value, gt, g.data()[0].widen())?;
                    accumulate(&mut grads[logits.0], gx);
                }
            }
        }

        let inputs = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| if matches!(self.nodes[i].op, Op::Input) { g } else { None })
            .collect();
        Ok(Gradients { inputs, params: param_grads })
    }
}

fn accumulate_params<T: Scalar>(dst: &mut ConvParams<T>, src: &ConvParams<T>) {
    let (dw, db) = dst.split_mut();
    for (a, &b) in dw.iter_mut().zip(src.weights()) {
        *a = *a + b;
    }
    for (a, &b) in db.iter_mut().zip(src.bias()) {
        *a = *a + b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_without_forward_is_usage_error() {
        let tape = Tape::<f32>::new();
        let r = tape.backward(Var(0), Tensor::scalar(1.0));
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn relu_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(1, 1, 2, vec![-1.0, 2.0]).unwrap());
        let r = tape.relu(x).unwrap();
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.input(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::new(1, 1, 2, vec![1.5, -3.0]).unwrap());
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.input(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn concat_gradient_splits_by_block() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::zeros(2, 2, 2));
        let b = tape.input(Tensor::zeros(1, 2, 2));
        let ab = tape.concat_channels(a, b).unwrap();
        let up = Tensor::from_fn(3, 2, 2, |c, y, x| (c * 10 + y * 2 + x) as f32);
        let g = tape.backward(ab, up.clone()).unwrap();
        assert_eq!(g.input(a).unwrap(), &up.slice_channels(0..2).unwrap());
        assert_eq!(g.input(b).unwrap(), &up.slice_channels(2..3).unwrap());
    }

    #[test]
    fn upstream_shape_checked() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::zeros(1, 2, 2));
        assert!(matches!(tape.backward(a, Tensor::zeros(1, 2, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn unused_input_has_no_gradient() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::zeros(1, 2, 2));
        let b = tape.input(Tensor::zeros(1, 2, 2));
        let s = tape.sum(a).unwrap();
        let g = tape.backward(s, Tensor::scalar(1.0)).unwrap();
        assert!(g.input(a).is_some());
        assert!(g.input(b).is_none());
    }
}
