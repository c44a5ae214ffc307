//! Trainable building blocks: parameters, dilated convolution and batch norm.

use crate::error::{Error, Result};
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

/// Batch norm behaviour: batch statistics while training, running
/// statistics at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    id: ParamId,
    value: Tensor<T>,
    grad: Tensor<T>,
}

impl<T: Real> Parameter<T> {
    pub fn new(id: ParamId, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter { id, value, grad }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor<T> {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor<T> {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Replaces the value, keeping the shape fixed.
    pub fn assign(&mut self, value: Tensor<T>) -> Result<()> {
        crate::tensor::ensure_same_shape("assign", self.value.shape(), value.shape())?;
        self.value = value;
        Ok(())
    }
}

/// Anything exposing a list of trainable parameters in a stable order.
pub trait HasParameters<T: Real> {
    fn parameters(&self) -> Vec<&Parameter<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;
}

impl<T: Real> HasParameters<T> for Vec<Parameter<T>> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.iter_mut().collect()
    }
}

/// 3x3 convolution with dilation and "same" zero padding (`padding == dilation`).
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    dilation: usize,
}

impl<T: Real> Conv2d<T> {
    /// `weight` is `[out, in, 3, 3]`, `bias` is `[1, out, 1, 1]`.
    pub fn new(weight: Parameter<T>, bias: Parameter<T>, dilation: usize) -> Result<Self> {
        let ws = weight.value().shape();
        crate::kernels::check_conv(
            Shape {
                channels: ws.channels,
                ..Shape::scalar()
            },
            ws,
            bias.value().shape(),
        )?;
        if dilation == 0 {
            return Err(Error::InvalidArgument("dilation must be positive".into()));
        }
        Ok(Conv2d {
            weight,
            bias,
            dilation,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape().channels
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape().batch
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn padding(&self) -> usize {
        self.dilation
    }

    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(input, w, b, self.dilation)
    }
}

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T = f32> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Real> BatchNorm2d<T> {
    /// gamma = 1, beta = 0, running mean 0, running var 1.
    pub fn new(channels: usize, gamma_id: ParamId, beta_id: ParamId) -> Result<Self> {
        let shape = Shape::vector(channels)?;
        Ok(BatchNorm2d {
            gamma: Parameter::new(gamma_id, Tensor::ones(shape)),
            beta: Parameter::new(beta_id, Tensor::zeros(shape)),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::ones(shape),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        })
    }

    pub fn channels(&self) -> usize {
        self.gamma.value().len()
    }

    fn check_input(&self, tape: &Tape<T>, input: Var) -> Result<()> {
        let c = tape.value(input)?.shape().channels;
        if c != self.channels() {
            return Err(Error::shape("batchnorm2d", "channels", self.channels(), c));
        }
        Ok(())
    }

    /// Normalises with batch statistics and folds them into the running
    /// estimates (the variance estimate uses the unbiased batch variance).
    pub fn forward_train(&mut self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        self.check_input(tape, input)?;
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        let (out, moments) = tape.batchnorm_train(input, g, b, self.epsilon)?;
        let m = self.momentum;
        let n = moments.count as f64;
        let unbias = n / (n - 1.0);
        for (rm, &bm) in self.running_mean.data_mut().iter_mut().zip(&moments.mean) {
            *rm = T::of((1.0 - m) * rm.as_f64() + m * bm);
        }
        for (rv, &bv) in self.running_var.data_mut().iter_mut().zip(&moments.var) {
            *rv = T::of((1.0 - m) * rv.as_f64() + m * bv * unbias);
        }
        Ok(out)
    }

    pub fn forward_eval(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        self.check_input(tape, input)?;
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        tape.batchnorm_eval(
            input,
            g,
            b,
            self.running_mean.data(),
            self.running_var.data(),
            self.epsilon,
        )
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, input: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Train => self.forward_train(tape, input),
            Mode::Eval => self.forward_eval(tape, input),
        }
    }
}
