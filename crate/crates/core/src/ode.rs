//! Randomized forward Euler integration of `dh/dt = F(h, t)` on `[0, 1]`.
//!
//! With `N` steps of size `dt = 1 / N`, step `k` evaluates the field at the
//! jittered time `(k + u_k) * dt` with `u_k` in `[0, 1)`:
//!
//! ```text
//! h_{k+1} = h_k + dt * F(h_k, (k + u_k) * dt)
//! ```
//!
//! Only the time argument is jittered; the state argument is the left
//! endpoint. Every step is recorded on the tape, so the backward pass
//! differentiates through the whole unrolled solve.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::rng::{stream, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Real;

pub const HORIZON: f64 = 1.0;

/// Right-hand side of the ODE.
pub trait Dynamics<T: Real> {
    /// Required channel count of the state, if the field has one.
    fn channels(&self) -> Option<usize>;

    fn eval(&mut self, tape: &mut Tape<T>, h: Var, t: T, mode: Mode) -> Result<Var>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntegrationPlan {
    steps: usize,
    offsets: Vec<f64>,
    mode: Mode,
    rng_seed: Option<u64>,
}

impl IntegrationPlan {
    /// Left-endpoint Euler (`u_k = 0`).
    pub fn deterministic(steps: usize, mode: Mode) -> Result<Self> {
        Self::with_offsets(vec![0.0; steps], mode)
    }

    /// Offsets drawn with [`sample_offsets`].
    pub fn randomized(steps: usize, seed: u64, mode: Mode) -> Result<Self> {
        let mut plan = Self::with_offsets(sample_offsets(seed, steps), mode)?;
        plan.rng_seed = Some(seed);
        Ok(plan)
    }

    pub fn with_offsets(offsets: Vec<f64>, mode: Mode) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("integration needs at least one step".into()));
        }
        if let Some(bad) = offsets.iter().find(|u| !(0.0..1.0).contains(*u)) {
            return Err(Error::InvalidArgument(format!("offset {bad} outside [0, 1)")));
        }
        Ok(IntegrationPlan {
            steps: offsets.len(),
            offsets,
            mode,
            rng_seed: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn horizon(&self) -> f64 {
        HORIZON
    }

    pub fn step_size(&self) -> f64 {
        HORIZON / self.steps as f64
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng_seed(&self) -> Option<u64> {
        self.rng_seed
    }

    /// Field evaluation times `(k + u_k) * dt`.
    pub fn times(&self) -> Vec<f64> {
        let dt = self.step_size();
        self.offsets
            .iter()
            .enumerate()
            .map(|(k, u)| (k as f64 + u) * dt)
            .collect()
    }
}

/// `n` uniform draws in `[0, 1)` from the solver stream of `seed`.
pub fn sample_offsets(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, Stream::Solver, 0);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Integrates from `h0` to `t = 1` and returns the terminal state.
pub fn integrate<T, F>(field: &mut F, tape: &mut Tape<T>, h0: Var, plan: &IntegrationPlan) -> Result<Var>
where
    T: Real,
    F: Dynamics<T> + ?Sized,
{
    if let Some(c) = field.channels() {
        let found = tape.value(h0)?.shape().channels;
        if found != c {
            return Err(Error::ChannelMismatch { expected: c, found });
        }
    }
    let mode = plan.mode();
    integrate_with(tape, h0, plan, |tape, h, t| field.eval(tape, h, t, mode))
}

/// Same as [`integrate`] with the field given as a closure.
pub fn integrate_with<T, E>(tape: &mut Tape<T>, h0: Var, plan: &IntegrationPlan, mut eval: E) -> Result<Var>
where
    T: Real,
    E: FnMut(&mut Tape<T>, Var, T) -> Result<Var>,
{
    let dt = T::of(plan.step_size());
    let mut h = h0;
    for t in plan.times() {
        let f = eval(tape, h, T::of(t))?;
        h = tape.axpy(dt, f, h)?;
    }
    Ok(h)
}

/// Terminal errors `|h_N - exact|` of left-endpoint Euler for each step count,
/// on a scalar state starting at `h0`.
pub fn order_probe<F: Dynamics<f64>>(field: &mut F, h0: f64, exact: f64, steps: &[usize]) -> Result<Vec<(usize, f64)>> {
    steps
        .iter()
        .map(|&n| {
            let plan = IntegrationPlan::deterministic(n, Mode::Eval)?;
            Ok((n, (solve_scalar(field, h0, &plan)? - exact).abs()))
        })
        .collect()
}

/// Mean terminal error of randomized Euler over `seeds`.
pub fn randomized_error<F: Dynamics<f64>>(
    field: &mut F,
    h0: f64,
    exact: f64,
    steps: usize,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for seed in seeds {
        let plan = IntegrationPlan::randomized(steps, seed, Mode::Eval)?;
        total += solve_scalar(field, h0, &plan)? - exact;
        count += 1;
    }
    Ok((total / count.max(1) as f64).abs())
}

pub fn solve_scalar<F: Dynamics<f64>>(field: &mut F, h0: f64, plan: &IntegrationPlan) -> Result<f64> {
    let mut tape = Tape::new();
    let h = tape.constant(crate::tensor::Tensor::scalar(h0));
    let out = integrate(field, &mut tape, h, plan)?;
    Ok(tape.value(out)?.data()[0])
}

/// Closed-form fields for checking the solver.
pub mod stubs {
    use super::*;
    use crate::tensor::Tensor;

    /// `F(h, t) = -rate * h`.
    pub struct LinearDecay {
        pub rate: f64,
    }

    impl<T: Real> Dynamics<T> for LinearDecay {
        fn channels(&self) -> Option<usize> {
            None
        }

        fn eval(&mut self, tape: &mut Tape<T>, h: Var, _t: T, _mode: Mode) -> Result<Var> {
            tape.scale(T::of(-self.rate), h)
        }
    }

    /// `F(h, t) = value` everywhere.
    pub struct Constant {
        pub value: f64,
    }

    impl<T: Real> Dynamics<T> for Constant {
        fn channels(&self) -> Option<usize> {
            None
        }

        fn eval(&mut self, tape: &mut Tape<T>, h: Var, _t: T, _mode: Mode) -> Result<Var> {
            let shape = tape.value(h)?.shape();
            Ok(tape.constant(Tensor::full(shape, T::of(self.value))))
        }
    }

    /// `F(h, t) = g(t)`, independent of the state.
    pub struct TimeOnly<G>(pub G);

    impl<T: Real, G: Fn(f64) -> f64> Dynamics<T> for TimeOnly<G> {
        fn channels(&self) -> Option<usize> {
            None
        }

        fn eval(&mut self, tape: &mut Tape<T>, h: Var, t: T, _mode: Mode) -> Result<Var> {
            let shape = tape.value(h)?.shape();
            Ok(tape.constant(Tensor::full(shape, T::of((self.0)(t.as_f64())))))
        }
    }
}
