//! Optimisation loop: Adam on the MSE loss, learning-rate halving on a
//! training-loss plateau and early stopping on an eval-loss plateau.
//!
//! A plateau means the loss has not improved on its best value so far for
//! `patience` consecutive epochs.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::{Dataset, PatchSet};
use crate::error::{Error, Result};
use crate::layers::{HasParameters, Mode, Parameter};
use crate::metrics::{mean_psnr, psnr_per_sample};
use crate::model::{Denoiser, Offsets};
use crate::rng::{derive, stream, Stream};
use crate::tape::Tape;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are stored per parameter in the
/// order of [`HasParameters::parameters`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    /// An optimiser without moments; call [`init_moments`](Self::init_moments)
    /// before the first step.
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn for_model<M: HasParameters<f32>>(config: AdamConfig, model: &M) -> Self {
        let mut adam = Adam::new(config);
        adam.init_moments(model);
        adam
    }

    pub fn init_moments<M: HasParameters<f32>>(&mut self, model: &M) {
        let shapes: Vec<_> = model.parameters().iter().map(|p| p.value().shape()).collect();
        self.m = shapes.iter().map(|&s| Tensor::zeros(s)).collect();
        self.v = shapes.iter().map(|&s| Tensor::zeros(s)).collect();
        self.t = 0;
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: Vec<&mut Parameter<f32>>) -> Result<()> {
        if self.m.len() != params.len() || self.m.is_empty() {
            return Err(Error::UninitializedMoments(params.len()));
        }
        for (k, p) in params.iter().enumerate() {
            crate::tensor::ensure_same_shape("adam", self.m[k].shape(), p.value().shape())?;
        }
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let c1 = 1.0 - beta1.powf(self.t as f64);
        let c2 = 1.0 - beta2.powf(self.t as f64);
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().data().to_vec();
            let value = p.value_mut().data_mut();
            for i in 0..value.len() {
                let g = grad[i] as f64;
                let mi = beta1 * m.data()[i] as f64 + (1.0 - beta1) * g;
                let vi = beta2 * v.data()[i] as f64 + (1.0 - beta2) * g * g;
                m.data_mut()[i] = mi as f32;
                v.data_mut()[i] = vi as f32;
                let update = lr * (mi / c1) / ((vi / c2).sqrt() + epsilon);
                value[i] = (value[i] as f64 - update) as f32;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Tracks epochs without improvement on the best value so far.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plateau {
    pub patience: usize,
    pub best: Option<f64>,
    pub stale: usize,
}

impl Plateau {
    pub fn new(patience: usize) -> Self {
        Plateau {
            patience: patience.max(1),
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch; true once `patience` non-improving epochs in a row
    /// have been seen.
    pub fn observe(&mut self, value: f64) -> bool {
        match self.best {
            Some(best) if value >= best => self.stale += 1,
            _ => {
                self.best = Some(value);
                self.stale = 0;
            }
        }
        self.stale >= self.patience
    }

    pub fn reset_counter(&mut self) {
        self.stale = 0;
    }
}

/// Halves the learning rate when the training loss plateaus. Returns true
/// when the rate changed.
pub fn lr_schedule_update(plateau: &mut Plateau, adam: &mut Adam, train_loss: f64) -> bool {
    if plateau.observe(train_loss) {
        adam.config.lr /= 2.0;
        plateau.reset_counter();
        true
    } else {
        false
    }
}

/// True when the last `patience` eval losses all failed to improve on the
/// best loss before them.
pub fn early_stop_check(eval_losses: &[f64], patience: usize) -> bool {
    let mut plateau = Plateau::new(patience);
    eval_losses.iter().fold(false, |_, &l| plateau.observe(l))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub lr_halve_patience: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Optional cap on the total number of optimiser steps.
    pub max_steps: Option<u64>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 40,
            max_epochs: 50,
            lr_halve_patience: 3,
            early_stop_patience: 5,
            seed: 0,
            max_steps: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "batch size {} must be at least 2 (batch norm needs two samples)",
                self.batch_size
            )));
        }
        if self.max_epochs == 0 || self.lr_halve_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidArgument("epochs and patiences must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub eval_psnr: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    MaxSteps,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxSteps => "max_steps",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [StopReason::MaxEpochs, StopReason::EarlyStop, StopReason::MaxSteps]
            .into_iter()
            .find(|r| r.as_str() == s)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub stop: Option<StopReason>,
}

pub const LOG_HEADER: &str = "epoch,train_loss,eval_loss,eval_psnr,lr,seconds";

impl TrainLog {
    pub fn eval_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.eval_loss).collect()
    }

    /// CSV text. Wall time is the only non-reproducible column; leave it out
    /// to compare runs.
    pub fn to_csv(&self, with_seconds: bool) -> String {
        let mut out = String::new();
        if with_seconds {
            out.push_str(LOG_HEADER);
        } else {
            out.push_str(LOG_HEADER.trim_end_matches(",seconds"));
        }
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.eval_loss, r.eval_psnr, r.lr
            ));
            if with_seconds {
                out.push_str(&format!(",{:.3}", r.seconds));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Sum of per-patch squared errors divided by the patch count, the same
    /// normalisation as the training loss.
    pub loss: f64,
    pub mean_psnr: f64,
    pub psnr: Vec<f64>,
}

/// Eval-mode loss and PSNR on a set whose noisy patches are already drawn.
/// Outputs are clipped to `[0, 1]` for PSNR only.
pub fn evaluate_model(model: &Denoiser<f32>, set: &PatchSet, batch_size: usize, offsets: Offsets) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let mut sse = 0.0;
    let mut values = Vec::with_capacity(set.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (noisy, clean) = set.gather(chunk)?;
        let noisy = noisy.ok_or_else(|| Error::InvalidArgument("eval patches have no noisy copy".into()))?;
        let out = model.denoise(&noisy, offsets)?;
        sse += out
            .data()
            .iter()
            .zip(clean.data())
            .map(|(&p, &t)| (p as f64 - t as f64).powi(2))
            .sum::<f64>();
        values.extend(psnr_per_sample(&out, &clean, 1.0)?);
    }
    Ok(EvalReport {
        loss: sse / set.len() as f64,
        mean_psnr: mean_psnr(&values),
        psnr: values.iter().map(|p| p.decibels).collect(),
    })
}

/// Mean PSNR of the noisy eval inputs themselves.
pub fn input_psnr(set: &PatchSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = (0..set.len()).collect();
    let (noisy, clean) = set.gather(&indices)?;
    let noisy = noisy.ok_or_else(|| Error::InvalidArgument("eval patches have no noisy copy".into()))?;
    Ok(mean_psnr(&psnr_per_sample(&noisy, &clean, 1.0)?))
}

/// Owns the optimiser state of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam,
    pub log: TrainLog,
    steps: u64,
    train_plateau: Plateau,
    work: u64,
    compute_seconds: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig, model: &Denoiser<f32>) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            adam: Adam::for_model(config.adam, model),
            log: TrainLog::default(),
            steps: 0,
            train_plateau: Plateau::new(config.lr_halve_patience),
            work: 0,
            compute_seconds: 0.0,
            config,
        })
    }

    /// Optimiser steps taken so far.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Forward work recorded on the tapes of all steps so far.
    pub fn work(&self) -> u64 {
        self.work
    }

    /// Wall time spent in forward, backward and update.
    pub fn compute_seconds(&self) -> f64 {
        self.compute_seconds
    }

    /// One optimiser step on a batch; returns the batch loss.
    pub fn train_batch(&mut self, model: &mut Denoiser<f32>, noisy: Tensor<f32>, clean: Tensor<f32>) -> Result<f64> {
        let started = Instant::now();
        let offsets = Offsets::Sampled(derive(self.config.seed, self.steps));
        let mut tape = Tape::new();
        let y = tape.constant(noisy);
        let target = tape.constant(clean);
        let out = model.forward(&mut tape, y, offsets, Mode::Train)?;
        let loss = tape.mse_loss(out, target)?;
        let value = tape.value(loss)?.data()[0].as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.steps,
                value,
            });
        }
        self.work += tape.work();
        let grads = tape.backward(loss)?;
        grads.accumulate_into(model.parameters_mut())?;
        self.adam.step(model.parameters_mut())?;
        self.steps += 1;
        self.compute_seconds += started.elapsed().as_secs_f64();
        Ok(value)
    }

    fn step_budget_left(&self) -> bool {
        self.config.max_steps.is_none_or(|m| self.steps < m)
    }

    /// One pass over the shuffled training patches with fresh noise.
    /// Returns the mean batch loss. A trailing batch of one patch is skipped
    /// because batch norm needs two samples.
    pub fn train_epoch(&mut self, model: &mut Denoiser<f32>, data: &Dataset, epoch: usize) -> Result<f64> {
        if data.train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut stream(self.config.seed, Stream::Shuffle, epoch as u64));
        let mut noise = data.epoch_noise(epoch);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            if chunk.len() < 2 || !self.step_budget_left() {
                break;
            }
            let (noisy, clean, _) = data.noisy_train_batch(chunk, &mut noise)?;
            total += self.train_batch(model, noisy, clean)?;
            batches += 1;
        }
        if batches == 0 {
            return Err(Error::EmptyDataset);
        }
        Ok(total / batches as f64)
    }

    /// Runs epochs until the epoch limit, the step limit or early stopping.
    /// `on_epoch` sees every record as it is produced.
    pub fn run(
        &mut self,
        model: &mut Denoiser<f32>,
        data: &Dataset,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<StopReason> {
        let eval_batch = self.config.batch_size;
        let mut eval_plateau = Plateau::new(self.config.early_stop_patience);
        let first = self.log.records.len();
        let mut reason = StopReason::MaxEpochs;
        for epoch in first..self.config.max_epochs {
            let started = Instant::now();
            let lr = self.adam.lr();
            let train_loss = self.train_epoch(model, data, epoch)?;
            let report = evaluate_model(model, &data.eval, eval_batch, Offsets::Zero)?;
            let record = EpochRecord {
                epoch: epoch + 1,
                train_loss,
                eval_loss: report.loss,
                eval_psnr: report.mean_psnr,
                lr,
                seconds: started.elapsed().as_secs_f64(),
            };
            on_epoch(&record);
            self.log.records.push(record);
            lr_schedule_update(&mut self.train_plateau, &mut self.adam, train_loss);
            if eval_plateau.observe(report.loss) {
                reason = StopReason::EarlyStop;
                break;
            }
            if !self.step_budget_left() {
                reason = StopReason::MaxSteps;
                break;
            }
        }
        self.log.stop = Some(reason);
        Ok(reason)
    }
}
