//! Image denoising with a learned vector field integrated by a randomized
//! forward Euler solver.
//!
//! The noisy image is the initial state `h(0)` of `dh/dt = F(h, t)` and the
//! denoised image is `h(1)`. `F` is a 9-layer dilated CNN. Training
//! differentiates through the unrolled solver with a small reverse-mode
//! autodiff tape.

pub mod ablation;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod field;
pub mod gradcheck;
mod kernels;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod ode;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use field::{receptive_fields, VectorField, VectorFieldConfig};
pub use layers::{BatchNorm2d, Conv2d, HasParameters, Mode, Parameter};
pub use model::{Denoiser, Offsets};
pub use ode::{integrate, IntegrationPlan};
pub use tape::{Gradients, ParamId, Tape, Var};
pub use tensor::{Real, Shape, Tensor};
pub use train::{Adam, AdamConfig, TrainConfig, TrainLog, Trainer};
