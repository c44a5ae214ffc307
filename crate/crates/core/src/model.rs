//! The denoiser: a vector field plus the number of solver steps.
//!
//! With `steps >= 1` the output is the Euler solution `h(1)` started from the
//! noisy image. `steps == 0` is the ablation baseline that returns the bare
//! vector field `F(y, 0)` without any skip connection.

use crate::error::Result;
use crate::field::{VectorField, VectorFieldConfig};
use crate::layers::{HasParameters, Mode, Parameter};
use crate::ode::{integrate, integrate_with, IntegrationPlan};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// How the per-step time offsets are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Offsets {
    /// Left-endpoint Euler, used for deterministic inference.
    Zero,
    /// Uniform offsets from the solver stream of this seed.
    Sampled(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser<T = f32> {
    pub field: VectorField<T>,
    steps: usize,
}

impl<T: Real> Denoiser<T> {
    pub fn new(field: VectorField<T>, steps: usize) -> Self {
        Denoiser { field, steps }
    }

    pub fn build(config: VectorFieldConfig, steps: usize) -> Result<Self> {
        Ok(Denoiser::new(VectorField::build(config)?, steps))
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn config(&self) -> &VectorFieldConfig {
        self.field.config()
    }

    pub fn plan(&self, offsets: Offsets, mode: Mode) -> Result<Option<IntegrationPlan>> {
        if self.steps == 0 {
            return Ok(None);
        }
        let plan = match offsets {
            Offsets::Zero => IntegrationPlan::deterministic(self.steps, mode)?,
            Offsets::Sampled(seed) => IntegrationPlan::randomized(self.steps, seed, mode)?,
        };
        Ok(Some(plan))
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, y: Var, offsets: Offsets, mode: Mode) -> Result<Var> {
        match self.plan(offsets, mode)? {
            None => self.field.evaluate(tape, y, T::zero(), mode),
            Some(plan) => integrate(&mut self.field, tape, y, &plan),
        }
    }

    /// Eval-mode forward pass; leaves every parameter and running statistic untouched.
    pub fn forward_eval(&self, tape: &mut Tape<T>, y: Var, offsets: Offsets) -> Result<Var> {
        match self.plan(offsets, Mode::Eval)? {
            None => self.field.evaluate_eval(tape, y, T::zero()),
            Some(plan) => {
                let found = tape.value(y)?.shape().channels;
                let expected = self.config().image_channels;
                if found != expected {
                    return Err(crate::Error::ChannelMismatch { expected, found });
                }
                integrate_with(tape, y, &plan, |tape, h, t| self.field.evaluate_eval(tape, h, t))
            }
        }
    }

    /// Denoises a batch of images in eval mode. The result is not clipped.
    pub fn denoise(&self, noisy: &Tensor<T>, offsets: Offsets) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let y = tape.constant(noisy.clone());
        let out = self.forward_eval(&mut tape, y, offsets)?;
        Ok(tape.value(out)?.clone())
    }

    pub fn param_count(&self) -> usize {
        self.field.param_count()
    }

    pub fn state_hash(&self) -> u64 {
        self.field.state_hash()
    }
}

impl<T: Real> HasParameters<T> for Denoiser<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        self.field.parameters()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.field.parameters_mut()
    }
}
