//! The learned vector field `F(h, t)`: a 9-layer dilated CNN.
//!
//! The time value enters as an extra constant input plane. Layers 1-8 are
//! conv + batch norm + ReLU, layer 9 is a bare conv mapping back to the image
//! channel count, so `F(h, t)` has the same shape as `h`.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, HasParameters, Mode, Parameter};
use crate::ode::Dynamics;
use crate::tape::{ParamId, Tape, Var};
use crate::tensor::{Real, Shape, Tensor};

pub const LAYERS: usize = 9;

/// Dilation 1 for the first layer and the last two, 4 in between.
pub const DEFAULT_DILATIONS: [usize; LAYERS] = [1, 4, 4, 4, 4, 4, 4, 1, 1];

pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VectorFieldConfig {
    /// 1 for gray images, 3 for color.
    pub image_channels: usize,
    pub hidden_channels: usize,
    pub dilations: [usize; LAYERS],
    pub init_seed: u64,
    /// Start the last conv at zero weights, so an untrained model with
    /// `N >= 1` steps is the identity map.
    pub zero_output: bool,
}

impl Default for VectorFieldConfig {
    fn default() -> Self {
        VectorFieldConfig {
            image_channels: 1,
            hidden_channels: DEFAULT_HIDDEN,
            dilations: DEFAULT_DILATIONS,
            init_seed: 0,
            zero_output: true,
        }
    }
}

impl VectorFieldConfig {
    pub fn new(image_channels: usize, hidden_channels: usize) -> Self {
        VectorFieldConfig {
            image_channels,
            hidden_channels,
            ..Default::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    pub fn with_zero_output(mut self, zero_output: bool) -> Self {
        self.zero_output = zero_output;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !matches!(self.image_channels, 1 | 3) {
            return Err(Error::InvalidArgument(format!(
                "image channels must be 1 or 3, got {}",
                self.image_channels
            )));
        }
        if self.hidden_channels == 0 {
            return Err(Error::InvalidArgument("hidden channels must be at least 1".into()));
        }
        if self.dilations.contains(&0) {
            return Err(Error::InvalidArgument("dilations must be positive".into()));
        }
        Ok(())
    }

    /// `(in, out)` channel counts of every layer.
    pub fn layer_channels(&self) -> [(usize, usize); LAYERS] {
        let c = self.image_channels;
        let h = self.hidden_channels;
        let mut out = [(h, h); LAYERS];
        out[0] = (c + 1, h);
        out[LAYERS - 1] = (h, c);
        out
    }

    pub fn receptive_fields(&self) -> Vec<usize> {
        receptive_fields(&self.dilations)
    }
}

/// Receptive field after each 3x3 layer: every layer widens the field by
/// `(3 - 1) * dilation`, starting from a single pixel.
pub fn receptive_fields(dilations: &[usize]) -> Vec<usize> {
    dilations
        .iter()
        .scan(1, |r, &d| {
            *r += 2 * d;
            Some(*r)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T = f32> {
    config: VectorFieldConfig,
    convs: Vec<Conv2d<T>>,
    norms: Vec<BatchNorm2d<T>>,
}

impl<T: Real> VectorField<T> {
    /// Fan-in scaled uniform weights (bound `sqrt(1 / (in * 9))`), zero biases,
    /// identity batch norms. Deterministic in `config.init_seed`. With
    /// `zero_output` the last conv weights are drawn and then cleared, so the
    /// other layers do not depend on the flag.
    pub fn build(config: VectorFieldConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut next_id = 0u32;
        let mut id = || {
            next_id += 1;
            ParamId(next_id - 1)
        };
        let mut convs = Vec::with_capacity(LAYERS);
        let mut norms = Vec::with_capacity(LAYERS - 1);
        for (k, &(cin, cout)) in config.layer_channels().iter().enumerate() {
            let bound = (1.0 / (cin * 9) as f64).sqrt();
            let wshape = Shape::new(cout, cin, 3, 3)?;
            let mut weights: Vec<T> = (0..wshape.numel())
                .map(|_| T::of(rng.random_range(-bound..bound)))
                .collect();
            if config.zero_output && k + 1 == LAYERS {
                weights.fill(T::zero());
            }
            let weight = Parameter::new(id(), Tensor::from_vec(wshape, weights)?);
            let bias = Parameter::new(id(), Tensor::zeros(Shape::vector(cout)?));
            convs.push(Conv2d::new(weight, bias, config.dilations[k])?);
            if k + 1 < LAYERS {
                norms.push(BatchNorm2d::new(cout, id(), id())?);
            }
        }
        Ok(VectorField {
            config,
            convs,
            norms,
        })
    }

    pub fn config(&self) -> &VectorFieldConfig {
        &self.config
    }

    pub fn convs(&self) -> &[Conv2d<T>] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [Conv2d<T>] {
        &mut self.convs
    }

    pub fn norms(&self) -> &[BatchNorm2d<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [BatchNorm2d<T>] {
        &mut self.norms
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value().len()).sum()
    }

    fn check_input(&self, tape: &Tape<T>, h: Var) -> Result<()> {
        let c = tape.value(h)?.shape().channels;
        if c != self.config.image_channels {
            return Err(Error::ChannelMismatch {
                expected: self.config.image_channels,
                found: c,
            });
        }
        Ok(())
    }

    /// `F(h, t)` with batch norm running statistics (no state changes).
    pub fn evaluate_eval(&self, tape: &mut Tape<T>, h: Var, t: T) -> Result<Var> {
        self.check_input(tape, h)?;
        let mut x = tape.concat_time_channel(h, t)?;
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            x = conv.forward(tape, x)?;
            x = bn.forward_eval(tape, x)?;
            x = tape.relu(x)?;
        }
        self.convs[LAYERS - 1].forward(tape, x)
    }

    /// `F(h, t)` with batch statistics; updates the running estimates.
    pub fn evaluate_train(&mut self, tape: &mut Tape<T>, h: Var, t: T) -> Result<Var> {
        self.check_input(tape, h)?;
        let mut x = tape.concat_time_channel(h, t)?;
        for (conv, bn) in self.convs.iter().zip(self.norms.iter_mut()) {
            x = conv.forward(tape, x)?;
            x = bn.forward_train(tape, x)?;
            x = tape.relu(x)?;
        }
        self.convs[LAYERS - 1].forward(tape, x)
    }

    pub fn evaluate(&mut self, tape: &mut Tape<T>, h: Var, t: T, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Train => self.evaluate_train(tape, h, t),
            Mode::Eval => self.evaluate_eval(tape, h, t),
        }
    }

    /// Named tensors making up the full model state, in a fixed order:
    /// conv weights and biases, then batch norm affine parameters and running
    /// statistics.
    pub fn named_state(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (k, conv) in self.convs.iter().enumerate() {
            out.push((format!("layer{}.conv.weight", k + 1), conv.weight.value()));
            out.push((format!("layer{}.conv.bias", k + 1), conv.bias.value()));
        }
        for (k, bn) in self.norms.iter().enumerate() {
            out.push((format!("layer{}.bn.gamma", k + 1), bn.gamma.value()));
            out.push((format!("layer{}.bn.beta", k + 1), bn.beta.value()));
            out.push((format!("layer{}.bn.running_mean", k + 1), &bn.running_mean));
            out.push((format!("layer{}.bn.running_var", k + 1), &bn.running_var));
        }
        out
    }

    /// Mutable view of the same tensors as [`named_state`](Self::named_state).
    pub fn named_state_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (k, conv) in self.convs.iter_mut().enumerate() {
            out.push((format!("layer{}.conv.weight", k + 1), conv.weight.value_mut()));
            out.push((format!("layer{}.conv.bias", k + 1), conv.bias.value_mut()));
        }
        for (k, bn) in self.norms.iter_mut().enumerate() {
            out.push((format!("layer{}.bn.gamma", k + 1), bn.gamma.value_mut()));
            out.push((format!("layer{}.bn.beta", k + 1), bn.beta.value_mut()));
            out.push((format!("layer{}.bn.running_mean", k + 1), &mut bn.running_mean));
            out.push((format!("layer{}.bn.running_var", k + 1), &mut bn.running_var));
        }
        out
    }

    /// Names of the trainable parameters, in [`HasParameters`] order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(2 * LAYERS + 2 * (LAYERS - 1));
        for k in 1..=LAYERS {
            out.push(format!("layer{k}.conv.weight"));
            out.push(format!("layer{k}.conv.bias"));
        }
        for k in 1..LAYERS {
            out.push(format!("layer{k}.bn.gamma"));
            out.push(format!("layer{k}.bn.beta"));
        }
        out
    }

    /// Hash of every parameter and running statistic.
    pub fn state_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (name, t) in self.named_state() {
            h.write(name.as_bytes());
            t.content_hash(&mut h);
        }
        h.finish()
    }
}

impl<T: Real> HasParameters<T> for VectorField<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::with_capacity(2 * LAYERS + 2 * (LAYERS - 1));
        for conv in &self.convs {
            out.push(&conv.weight);
            out.push(&conv.bias);
        }
        for bn in &self.norms {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::with_capacity(2 * LAYERS + 2 * (LAYERS - 1));
        for conv in &mut self.convs {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        for bn in &mut self.norms {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out
    }
}

impl<T: Real> Dynamics<T> for VectorField<T> {
    fn channels(&self) -> Option<usize> {
        Some(self.config.image_channels)
    }

    fn eval(&mut self, tape: &mut Tape<T>, h: Var, t: T, mode: Mode) -> Result<Var> {
        self.evaluate(tape, h, t, mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_layer_takes_time_channel() {
        let vf = VectorField::<f32>::build(VectorFieldConfig::new(3, 128)).unwrap();
        assert_eq!(
            vf.convs()[0].weight.value().shape(),
            Shape::new(128, 4, 3, 3).unwrap()
        );
    }

    #[test]
    fn last_layer_maps_back_to_image_channels() {
        let vf = VectorField::<f32>::build(VectorFieldConfig::new(1, 64)).unwrap();
        assert_eq!(
            vf.convs()[LAYERS - 1].weight.value().shape(),
            Shape::new(1, 64, 3, 3).unwrap()
        );
        assert_eq!(vf.norms().len(), 8);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = VectorFieldConfig::new(3, 8).with_seed(42);
        let a = VectorField::<f32>::build(cfg.clone()).unwrap();
        let b = VectorField::<f32>::build(cfg).unwrap();
        assert_eq!(a.state_hash(), b.state_hash());
        for (x, y) in a.named_state().iter().zip(b.named_state()) {
            assert!(x.1.bitwise_eq(y.1));
        }
        let c = VectorField::<f32>::build(VectorFieldConfig::new(3, 8).with_seed(43)).unwrap();
        assert_ne!(a.state_hash(), c.state_hash());
    }

    #[test]
    fn zero_output_only_clears_the_last_layer() {
        let a = VectorField::<f32>::build(VectorFieldConfig::new(1, 8).with_seed(3)).unwrap();
        let b = VectorField::<f32>::build(VectorFieldConfig::new(1, 8).with_seed(3).with_zero_output(false)).unwrap();
        for k in 0..LAYERS - 1 {
            assert!(a.convs()[k].weight.value().bitwise_eq(b.convs()[k].weight.value()));
        }
        assert!(a.convs()[LAYERS - 1].weight.value().data().iter().all(|&w| w == 0.0));
        assert!(b.convs()[LAYERS - 1].weight.value().data().iter().any(|&w| w != 0.0));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(VectorField::<f32>::build(VectorFieldConfig::new(2, 8)).is_err());
        assert!(VectorField::<f32>::build(VectorFieldConfig::new(1, 0)).is_err());
        let mut cfg = VectorFieldConfig::new(1, 4);
        cfg.dilations[3] = 0;
        assert!(VectorField::<f32>::build(cfg).is_err());
    }

    #[test]
    fn default_receptive_fields() {
        assert_eq!(
            receptive_fields(&DEFAULT_DILATIONS),
            vec![3, 11, 19, 27, 35, 43, 51, 53, 55]
        );
        assert_eq!(
            receptive_fields(&[1; 9]),
            vec![3, 5, 7, 9, 11, 13, 15, 17, 19]
        );
        assert_eq!(receptive_fields(&[1]), vec![3]);
    }

    #[test]
    fn output_shape_matches_input() {
        let mut vf = VectorField::<f32>::build(VectorFieldConfig::new(3, 4)).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::full(Shape::new(1, 3, 60, 60).unwrap(), 0.5));
        let f = vf.evaluate(&mut tape, h, 0.3, Mode::Eval).unwrap();
        assert_eq!(tape.value(f).unwrap().shape(), Shape::new(1, 3, 60, 60).unwrap());
        let f = vf.evaluate(&mut tape, h, 0.3, Mode::Train).unwrap();
        assert_eq!(tape.value(f).unwrap().shape(), Shape::new(1, 3, 60, 60).unwrap());
    }

    #[test]
    fn zero_input_gives_finite_output() {
        let mut vf = VectorField::<f32>::build(VectorFieldConfig::new(1, 8)).unwrap();
        assert!(vf.convs()[LAYERS - 1].bias.value().data().iter().all(|&b| b == 0.0));
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(Shape::new(2, 1, 16, 16).unwrap()));
        let before = tape.len();
        let f = vf.evaluate(&mut tape, h, 0.0, Mode::Train).unwrap();
        assert!(tape.len() > before);
        assert!(tape.value(f).unwrap().all_finite());
    }

    #[test]
    fn eval_mode_is_pure() {
        let vf = VectorField::<f32>::build(VectorFieldConfig::new(1, 6).with_seed(9)).unwrap();
        let input = Tensor::from_vec(
            Shape::new(1, 1, 12, 12).unwrap(),
            (0..144).map(|i| (i as f32 * 0.13).cos()).collect(),
        )
        .unwrap();
        let run = || {
            let mut tape = Tape::new();
            let h = tape.constant(input.clone());
            let f = vf.evaluate_eval(&mut tape, h, 0.25).unwrap();
            tape.value(f).unwrap().clone()
        };
        let hash = vf.state_hash();
        assert!(run().bitwise_eq(&run()));
        assert_eq!(hash, vf.state_hash());
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let vf = VectorField::<f32>::build(VectorFieldConfig::new(1, 4)).unwrap();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::zeros(Shape::new(1, 3, 8, 8).unwrap()));
        assert!(matches!(
            vf.evaluate_eval(&mut tape, h, 0.0),
            Err(Error::ChannelMismatch {
                expected: 1,
                found: 3
            })
        ));
    }

    #[test]
    fn parameter_count_from_shapes() {
        // Independent count: sum of conv (w + b) plus 2 per BN channel.
        let count = |c: usize, h: usize| {
            let layer = |i: usize, o: usize| o * i * 9 + o;
            layer(c + 1, h) + 7 * layer(h, h) + layer(h, c) + 8 * 2 * h
        };
        for (c, h) in [(1, 4), (3, 16), (3, 64)] {
            let vf = VectorField::<f32>::build(VectorFieldConfig::new(c, h)).unwrap();
            assert_eq!(vf.param_count(), count(c, h));
        }
        let middle = |vf: &VectorField<f32>| vf.convs()[3].weight.value().len();
        let a = VectorField::<f32>::build(VectorFieldConfig::new(3, 8)).unwrap();
        let b = VectorField::<f32>::build(VectorFieldConfig::new(3, 16)).unwrap();
        assert_eq!(middle(&b), 4 * middle(&a));
    }
}
