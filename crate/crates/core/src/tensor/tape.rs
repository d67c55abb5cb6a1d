//! Reverse-mode differentiation over a linear record of primitive calls.

use std::collections::BTreeMap;

use super::ops::{self, bilinear_up2_backward, conv2d_backward, maxpool_backward, maxpool_with_argmax, silu_backward};
use super::{ConvWeights, Element, Result, Shape, Tensor, TensorError};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a convolution parameter block registered on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Record {
    Leaf,
    Conv {
        input: Var,
        param: ParamId,
        stride: usize,
        padding: usize,
    },
    Silu(Var),
    SpaceToDepth {
        input: Var,
        block: usize,
    },
    Upsample(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat(Vec<Var>),
    Sum(Vec<Var>),
}

/// Single-writer record of one forward pass.
#[derive(Debug)]
pub struct Tape<T: Element> {
    values: Vec<Tensor<T>>,
    records: Vec<Record>,
    requires_grad: Vec<bool>,
    params: Vec<ConvWeights<T>>,
    silu_grad_scale: Option<T>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            records: Vec::new(),
            requires_grad: Vec::new(),
            params: Vec::new(),
            silu_grad_scale: None,
        }
    }

    /// Scales every SiLU input gradient by `factor`. Exists only so gradient
    /// checks have a broken backward to catch.
    #[doc(hidden)]
    pub fn corrupt_silu_backward(&mut self, factor: T) {
        self.silu_grad_scale = Some(factor);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Record::Leaf, requires_grad)
    }

    pub fn param(&mut self, weights: ConvWeights<T>) -> ParamId {
        self.params.push(weights);
        ParamId(self.params.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn param_value(&self, p: ParamId) -> &ConvWeights<T> {
        &self.params[p.0]
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    fn push(&mut self, value: Tensor<T>, record: Record, requires_grad: bool) -> Var {
        self.values.push(value);
        self.records.push(record);
        self.requires_grad.push(requires_grad);
        Var(self.values.len() - 1)
    }

    fn check(&self, v: Var) -> Result<&Tensor<T>> {
        self.values.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn conv2d(&mut self, input: Var, param: ParamId, stride: usize, padding: usize) -> Result<Var> {
        let out = ops::conv2d(self.check(input)?, &self.params[param.0], stride, padding)?;
        Ok(self.push(
            out,
            Record::Conv {
                input,
                param,
                stride,
                padding,
            },
            false,
        ))
    }

    pub fn conv1x1(&mut self, input: Var, param: ParamId) -> Result<Var> {
        let w = &self.params[param.0];
        if w.kernel_h != 1 || w.kernel_w != 1 {
            return Err(TensorError::NotPointwise {
                kernel_h: w.kernel_h,
                kernel_w: w.kernel_w,
            });
        }
        self.conv2d(input, param, 1, 0)
    }

    pub fn silu(&mut self, input: Var) -> Result<Var> {
        let out = ops::silu(self.check(input)?);
        Ok(self.push(out, Record::Silu(input), false))
    }

    pub fn space_to_depth(&mut self, input: Var, block: usize) -> Result<Var> {
        let out = ops::space_to_depth(self.check(input)?, block)?;
        Ok(self.push(out, Record::SpaceToDepth { input, block }, false))
    }

    pub fn bilinear_up2(&mut self, input: Var) -> Result<Var> {
        let out = ops::bilinear_up2(self.check(input)?);
        Ok(self.push(out, Record::Upsample(input), false))
    }

    pub fn maxpool_down2(&mut self, input: Var) -> Result<Var> {
        let (out, argmax) = maxpool_with_argmax(self.check(input)?)?;
        Ok(self.push(out, Record::MaxPool { input, argmax }, false))
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let ts = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let out = ops::concat_channels(&ts)?;
        Ok(self.push(out, Record::Concat(inputs.to_vec()), false))
    }

    pub fn sum_tensors(&mut self, inputs: &[Var]) -> Result<Var> {
        let ts = inputs.iter().map(|&v| self.check(v)).collect::<Result<Vec<_>>>()?;
        let out = ops::sum_tensors(&ts)?;
        Ok(self.push(out, Record::Sum(inputs.to_vec()), false))
    }

    /// Seeds `output` with `seed` and replays the tape in reverse.
    ///
    /// Returns gradients for every leaf created with `requires_grad` and for
    /// every registered parameter block. Leaves and parameters the output does
    /// not depend on get zero gradients.
    pub fn backward(&self, output: Var, seed: &Tensor<T>) -> Result<Gradients<T>> {
        let out_shape = self.check(output)?.shape();
        if seed.shape() != out_shape {
            return Err(TensorError::ShapeMismatch {
                expected: out_shape,
                actual: seed.shape(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        let mut pgrads: Vec<Option<ConvWeights<T>>> = vec![None; self.params.len()];
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            match &self.records[idx] {
                Record::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Record::Conv {
                    input,
                    param,
                    stride,
                    padding,
                } => {
                    let cg = conv2d_backward(&self.values[input.0], &self.params[param.0], *stride, *padding, &g)?;
                    accumulate(&mut grads, *input, cg.input);
                    match &mut pgrads[param.0] {
                        Some(acc) => add_weights(acc, &cg.weights),
                        slot => *slot = Some(cg.weights),
                    }
                }
                Record::Silu(input) => {
                    let mut gi = silu_backward(&self.values[input.0], &g);
                    if let Some(f) = self.silu_grad_scale {
                        gi = gi.map(|v| v * f);
                    }
                    accumulate(&mut grads, *input, gi);
                }
                Record::SpaceToDepth { input, block } => {
                    accumulate(&mut grads, *input, ops::depth_to_space(&g, *block)?);
                }
                Record::Upsample(input) => {
                    let s = self.values[input.0].shape();
                    accumulate(&mut grads, *input, bilinear_up2_backward(s, &g));
                }
                Record::MaxPool { input, argmax } => {
                    let s = self.values[input.0].shape();
                    accumulate(&mut grads, *input, maxpool_backward(s, argmax, &g));
                }
                Record::Concat(inputs) => {
                    let mut start = 0;
                    for v in inputs {
                        let c = self.values[v.0].channels();
                        accumulate(&mut grads, *v, g.channel_slice(start, c)?);
                        start += c;
                    }
                }
                Record::Sum(inputs) => {
                    for v in inputs {
                        accumulate(&mut grads, *v, g.clone());
                    }
                }
            }
        }

        let mut tensors = BTreeMap::new();
        for (idx, g) in grads.into_iter().enumerate() {
            if self.requires_grad[idx] {
                let shape: Shape = self.values[idx].shape();
                let g = g.unwrap_or_else(|| Tensor::from_raw(shape, vec![T::zero(); shape.numel()]));
                tensors.insert(Var(idx), g);
            }
        }
        for (idx, v) in self.values.iter().enumerate().skip(output.0 + 1) {
            if self.requires_grad[idx] {
                tensors.insert(
                    Var(idx),
                    Tensor::from_raw(v.shape(), vec![T::zero(); v.shape().numel()]),
                );
            }
        }
        let params = pgrads
            .into_iter()
            .enumerate()
            .map(|(i, g)| (ParamId(i), g.unwrap_or_else(|| self.params[i].zeros_like())))
            .collect();
        Ok(Gradients { tensors, params })
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn add_weights<T: Element>(acc: &mut ConvWeights<T>, g: &ConvWeights<T>) {
    for (a, &b) in acc.values.iter_mut().zip(&g.values) {
        *a = *a + b;
    }
    if let (Some(a), Some(b)) = (acc.bias.as_mut(), g.bias.as_ref()) {
        for (x, &y) in a.iter_mut().zip(b) {
            *x = *x + y;
        }
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Element> {
    tensors: BTreeMap<Var, Tensor<T>>,
    params: BTreeMap<ParamId, ConvWeights<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn tensor(&self, v: Var) -> Option<&Tensor<T>> {
        self.tensors.get(&v)
    }

    pub fn param(&self, p: ParamId) -> Option<&ConvWeights<T>> {
        self.params.get(&p)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (*k, v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &ConvWeights<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }
}
