//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value plus whatever
//! it needs for the backward pass. Nodes are only ever appended, so operand
//! indices are always smaller than the index of the node using them and a
//! single reverse sweep visits each node once.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::Parameter;
use crate::tensor::{ensure_same_shape, Real, Tensor};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Param,
    Conv2d,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    ConcatTime,
    Axpy,
    Scale,
    MseLoss,
}

enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        dilation: usize,
    },
    BatchNormTrain {
        gamma: Var,
        beta: Var,
        normalized: Vec<T>,
        inv_std: Vec<T>,
        input: Var,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu {
        input: Var,
    },
    ConcatTime {
        input: Var,
    },
    Axpy {
        a: T,
        x: Var,
        y: Var,
    },
    Scale {
        a: T,
        x: Var,
    },
    MseLoss {
        pred: Var,
        target: Var,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNormTrain { .. } => OpKind::BatchNormTrain,
            Op::BatchNormEval { .. } => OpKind::BatchNormEval,
            Op::Relu { .. } => OpKind::Relu,
            Op::ConcatTime { .. } => OpKind::ConcatTime,
            Op::Axpy { .. } => OpKind::Axpy,
            Op::Scale { .. } => OpKind::Scale,
            Op::MseLoss { .. } => OpKind::MseLoss,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a train-mode batch norm, used by the caller to
/// update its running estimates.
#[derive(Clone, Debug)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    pub count: usize,
}

pub struct Tape<T = f32> {
    id: u32,
    nodes: Vec<Node<T>>,
    params: BTreeMap<ParamId, Var>,
    work: u64,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
            work: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Approximate floating-point operation count of the recorded forward pass.
    pub fn work(&self) -> u64 {
        self.work
    }

    /// Kinds of the recorded nodes, in order.
    pub fn kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    pub fn value(&self, var: Var) -> Result<&Tensor<T>> {
        self.check(var)?;
        Ok(&self.nodes[var.index].value)
    }

    fn check(&self, var: Var) -> Result<()> {
        if var.tape != self.id || var.index >= self.nodes.len() {
            return Err(Error::DanglingNode(var.index));
        }
        Ok(())
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let var = Var {
            tape: self.id,
            index: self.nodes.len(),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        var
    }

    fn needs(&self, var: Var) -> bool {
        self.nodes[var.index].requires_grad
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a parameter leaf. A parameter is stored once per tape no matter
    /// how often it is used.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        if let Some(&var) = self.params.get(&p.id()) {
            return var;
        }
        let var = self.push(p.value().clone(), Op::Param(p.id()), true);
        self.params.insert(p.id(), var);
        var
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, dilation: usize) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        self.check(bias)?;
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be positive".into()));
        }
        let out = kernels::conv2d_forward(
            &self.nodes[input.index].value,
            &self.nodes[weight.index].value,
            &self.nodes[bias.index].value,
            dilation,
        )?;
        let ws = self.nodes[weight.index].value.shape();
        self.work += 2 * (out.len() * ws.channels * kernels::TAPS) as u64;
        let rg = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                dilation,
            },
            rg,
        ))
    }

    fn affine_vectors(&self, input: Var, gamma: Var, beta: Var) -> Result<(Vec<T>, Vec<T>)> {
        self.check(input)?;
        self.check(gamma)?;
        self.check(beta)?;
        let c = self.nodes[input.index].value.shape().channels;
        let g = self.nodes[gamma.index].value.data().to_vec();
        let b = self.nodes[beta.index].value.data().to_vec();
        if g.len() != c {
            return Err(Error::shape("batchnorm2d", "gamma length", c, g.len()));
        }
        if b.len() != c {
            return Err(Error::shape("batchnorm2d", "beta length", c, b.len()));
        }
        Ok((g, b))
    }

    /// Batch norm using the statistics of the current batch.
    pub fn batchnorm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchMoments)> {
        let (g, b) = self.affine_vectors(input, gamma, beta)?;
        let x = &self.nodes[input.index].value;
        let s = x.shape();
        let stats = kernels::batchnorm_train_forward(x, &g, &b, eps)?;
        self.work += 8 * s.numel() as u64;
        let moments = BatchMoments {
            mean: stats.mean,
            var: stats.var,
            count: s.batch * s.plane(),
        };
        let var = self.push(
            stats.output,
            Op::BatchNormTrain {
                input,
                gamma,
                beta,
                normalized: stats.normalized,
                inv_std: stats.inv_std,
            },
            true,
        );
        Ok((var, moments))
    }

    /// Batch norm using fixed statistics (`mean`, `var` per channel).
    pub fn batchnorm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (g, b) = self.affine_vectors(input, gamma, beta)?;
        let c = g.len();
        if mean.len() != c {
            return Err(Error::shape("batchnorm2d", "running mean length", c, mean.len()));
        }
        if var.len() != c {
            return Err(Error::shape("batchnorm2d", "running var length", c, var.len()));
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::of(1.0 / (v.as_f64() + eps).sqrt()))
            .collect();
        let x = &self.nodes[input.index].value;
        let out = kernels::batchnorm_eval_forward(x, &g, &b, mean, &inv_std)?;
        self.work += 4 * out.len() as u64;
        let rg = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            out,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input)?;
        let out = x.map(|v| if v > T::zero() { v } else { T::zero() });
        self.work += out.len() as u64;
        let rg = self.needs(input);
        Ok(self.push(out, Op::Relu { input }, rg))
    }

    /// Appends a constant plane of value `t` as an extra channel.
    pub fn concat_time_channel(&mut self, input: Var, t: T) -> Result<Var> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::TimeOutOfRange(t.as_f64()));
        }
        let x = self.value(input)?;
        let s = x.shape();
        let out_shape = s.with_channels(s.channels + 1)?;
        let mut data = Vec::with_capacity(out_shape.numel());
        for b in 0..s.batch {
            data.extend_from_slice(x.sample(b));
            data.extend(std::iter::repeat_n(t, s.plane()));
        }
        let out = Tensor::from_vec(out_shape, data)?;
        let rg = self.needs(input);
        Ok(self.push(out, Op::ConcatTime { input }, rg))
    }

    /// `a * x + y`.
    pub fn axpy(&mut self, a: T, x: Var, y: Var) -> Result<Var> {
        let xv = self.value(x)?;
        let yv = self.value(y)?;
        ensure_same_shape("axpy", xv.shape(), yv.shape())?;
        let data = xv
            .data()
            .iter()
            .zip(yv.data())
            .map(|(&xi, &yi)| a * xi + yi)
            .collect();
        let out = Tensor::from_vec(xv.shape(), data)?;
        self.work += 2 * out.len() as u64;
        let rg = self.needs(x) || self.needs(y);
        Ok(self.push(out, Op::Axpy { a, x, y }, rg))
    }

    /// `a * x`.
    pub fn scale(&mut self, a: T, x: Var) -> Result<Var> {
        let out = self.value(x)?.map(|v| a * v);
        self.work += out.len() as u64;
        let rg = self.needs(x);
        Ok(self.push(out, Op::Scale { a, x }, rg))
    }

    /// Sum of squared differences per batch item, averaged over the batch.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred)?;
        let t = self.value(target)?;
        ensure_same_shape("mse_loss", t.shape(), p.shape())?;
        let total: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| {
                let d = (a - b).as_f64();
                d * d
            })
            .sum();
        let out = Tensor::scalar(T::of(total / p.shape().batch as f64));
        self.work += 3 * p.len() as u64;
        let rg = self.needs(pred) || self.needs(target);
        Ok(self.push(out, Op::MseLoss { pred, target }, rg))
    }

    /// Runs the reverse sweep from a scalar `loss` and returns the gradient of
    /// every parameter that contributed to it. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let n = self.nodes[loss.index].value.len();
        if n != 1 {
            return Err(Error::NonScalarLoss(n));
        }
        let mut nodes = self.nodes;
        nodes.truncate(loss.index + 1);
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients::default();

        while let Some(node) = nodes.pop() {
            let idx = nodes.len();
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            match node.op {
                Op::Constant => {}
                Op::Param(id) => out.add(id, g)?,
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    dilation,
                } => {
                    let want_input = nodes[input.index].requires_grad;
                    let cg = kernels::conv2d_backward(
                        &nodes[input.index].value,
                        &nodes[weight.index].value,
                        &g,
                        dilation,
                        want_input,
                    )?;
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads, &nodes, input, dx)?;
                    }
                    accumulate(&mut grads, &nodes, weight, cg.weight)?;
                    let bshape = nodes[bias.index].value.shape();
                    accumulate(&mut grads, &nodes, bias, cg.bias.reshape(bshape)?)?;
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let gv = nodes[gamma.index].value.data().to_vec();
                    let ng = kernels::batchnorm_train_backward(&g, &normalized, &gv, &inv_std)?;
                    accumulate_norm(&mut grads, &nodes, input, gamma, beta, ng)?;
                }
                Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let gv = nodes[gamma.index].value.data().to_vec();
                    let ng = kernels::batchnorm_eval_backward(
                        &nodes[input.index].value,
                        &g,
                        &gv,
                        &mean,
                        &inv_std,
                    )?;
                    accumulate_norm(&mut grads, &nodes, input, gamma, beta, ng)?;
                }
                Op::Relu { input } => {
                    let x = &nodes[input.index].value;
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect();
                    let dx = Tensor::from_vec(x.shape(), data)?;
                    accumulate(&mut grads, &nodes, input, dx)?;
                }
                Op::ConcatTime { input } => {
                    let s = nodes[input.index].value.shape();
                    let gs = g.shape();
                    let mut data = Vec::with_capacity(s.numel());
                    for b in 0..s.batch {
                        data.extend_from_slice(&g.sample(b)[..s.sample()]);
                    }
                    debug_assert_eq!(gs.channels, s.channels + 1);
                    accumulate(&mut grads, &nodes, input, Tensor::from_vec(s, data)?)?;
                }
                Op::Axpy { a, x, y } => {
                    if nodes[x.index].requires_grad {
                        accumulate(&mut grads, &nodes, x, g.map(|v| a * v))?;
                    }
                    accumulate(&mut grads, &nodes, y, g)?;
                }
                Op::Scale { a, x } => {
                    accumulate(&mut grads, &nodes, x, g.map(|v| a * v))?;
                }
                Op::MseLoss { pred, target } => {
                    let p = &nodes[pred.index].value;
                    let t = &nodes[target.index].value;
                    let k = g.data()[0] * T::of(2.0 / p.shape().batch as f64);
                    let dp: Vec<T> = p
                        .data()
                        .iter()
                        .zip(t.data())
                        .map(|(&a, &b)| k * (a - b))
                        .collect();
                    if nodes[target.index].requires_grad {
                        let dt = dp.iter().map(|&v| -v).collect();
                        accumulate(&mut grads, &nodes, target, Tensor::from_vec(t.shape(), dt)?)?;
                    }
                    accumulate(&mut grads, &nodes, pred, Tensor::from_vec(p.shape(), dp)?)?;
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    var: Var,
    g: Tensor<T>,
) -> Result<()> {
    if !nodes[var.index].requires_grad {
        return Ok(());
    }
    match &mut grads[var.index] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn accumulate_norm<T: Real>(
    grads: &mut [Option<Tensor<T>>],
    nodes: &[Node<T>],
    input: Var,
    gamma: Var,
    beta: Var,
    ng: kernels::NormGrads<T>,
) -> Result<()> {
    accumulate(grads, nodes, input, ng.input)?;
    let gshape = nodes[gamma.index].value.shape();
    accumulate(grads, nodes, gamma, ng.gamma.reshape(gshape)?)?;
    let bshape = nodes[beta.index].value.shape();
    accumulate(grads, nodes, beta, ng.beta.reshape(bshape)?)
}

/// Parameter gradients produced by [`Tape::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T = f32> {
    by_id: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    fn add(&mut self, id: ParamId, g: Tensor<T>) -> Result<()> {
        match self.by_id.get_mut(&id) {
            Some(existing) => existing.add_assign(&g),
            None => {
                self.by_id.insert(id, g);
                Ok(())
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_id.get(&id)
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    /// Adds each gradient into the matching parameter's `grad` buffer.
    /// Parameters that did not take part in the loss are left untouched.
    pub fn accumulate_into<'a, I>(&self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Parameter<T>>,
    {
        for p in params {
            if let Some(g) = self.by_id.get(&p.id()) {
                p.grad_mut().add_assign(g)?;
            }
        }
        Ok(())
    }
}
