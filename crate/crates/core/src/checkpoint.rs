//! Binary checkpoints.
//!
//! All integers and reals are little-endian. Layout, in order:
//!
//! ```text
//! magic            4 bytes  "NIMG"
//! version          u32      currently 1
//! config block     u32 image channels, u32 hidden channels, 9 x u32 dilations,
//!                  u64 init seed, u8 zero-output flag, u32 solver steps,
//!                  u64 run seed
//! adam block       f64 lr, f64 beta1, f64 beta2, f64 epsilon, u64 step count
//! stop reason      u8       0 none, 1 max_epochs, 2 early_stop, 3 max_steps
//! log tail         u32 count, then per epoch: u32 epoch, f64 train loss,
//!                  f64 eval loss, f64 eval PSNR, f64 lr
//! tensors          u32 count, then per tensor: u32 name length, UTF-8 name,
//!                  4 x u32 dims (batch, channels, height, width), f32 values
//! checksum         u32      CRC-32 of every preceding byte
//! ```
//!
//! Tensor records hold the model state under the names of
//! [`VectorField::named_state`] followed by the Adam moments as
//! `adam.m.<parameter>` and `adam.v.<parameter>`. Wall times are not stored,
//! so two identical runs give identical files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::{VectorField, VectorFieldConfig, LAYERS};
use crate::layers::HasParameters;
use crate::model::Denoiser;
use crate::tensor::{Shape, Tensor};
use crate::train::{Adam, AdamConfig, EpochRecord, StopReason, TrainLog};

pub const MAGIC: [u8; 4] = *b"NIMG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Denoiser<f32>,
    pub adam: Adam,
    pub log: TrainLog,
    pub run_seed: u64,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor<f32>) {
        self.u32(name.len() as u32);
        self.0.extend_from_slice(name.as_bytes());
        for d in t.shape().dims() {
            self.u32(d as u32);
        }
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(Error::CheckpointTruncated(what))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self, what: &'static str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn tensor(&mut self) -> Result<(String, Tensor<f32>)> {
        let len = self.u32("tensor name length")? as usize;
        let name = String::from_utf8(self.take(len, "tensor name")?.to_vec()).map_err(|_| Error::CheckpointTensor {
            name: "?".into(),
            reason: "name is not UTF-8".into(),
        })?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = self.u32("tensor dims")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]).map_err(|_| Error::CheckpointTensor {
            name: name.clone(),
            reason: format!("invalid dims {dims:?}"),
        })?;
        let n = shape.numel();
        let bytes = self.take(n.checked_mul(4).ok_or(Error::CheckpointTruncated("tensor data"))?, "tensor data")?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok((name, Tensor::from_vec(shape, data)?))
    }
}

fn stop_code(stop: Option<StopReason>) -> u8 {
    match stop {
        None => 0,
        Some(StopReason::MaxEpochs) => 1,
        Some(StopReason::EarlyStop) => 2,
        Some(StopReason::MaxSteps) => 3,
    }
}

pub fn to_bytes(model: &Denoiser<f32>, adam: &Adam, log: &TrainLog, run_seed: u64) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&MAGIC);
    w.u32(VERSION);

    let cfg = model.config();
    w.u32(cfg.image_channels as u32);
    w.u32(cfg.hidden_channels as u32);
    for d in cfg.dilations {
        w.u32(d as u32);
    }
    w.u64(cfg.init_seed);
    w.u8(cfg.zero_output as u8);
    w.u32(model.steps() as u32);
    w.u64(run_seed);

    w.f64(adam.config.lr);
    w.f64(adam.config.beta1);
    w.f64(adam.config.beta2);
    w.f64(adam.config.epsilon);
    w.u64(adam.t);

    w.u8(stop_code(log.stop));
    w.u32(log.records.len() as u32);
    for r in &log.records {
        w.u32(r.epoch as u32);
        w.f64(r.train_loss);
        w.f64(r.eval_loss);
        w.f64(r.eval_psnr);
        w.f64(r.lr);
    }

    let state = model.field.named_state();
    let names = model.field.parameter_names();
    w.u32((state.len() + adam.m.len() + adam.v.len()) as u32);
    for (name, t) in &state {
        w.tensor(name, t);
    }
    for (name, m) in names.iter().zip(&adam.m) {
        w.tensor(&format!("adam.m.{name}"), m);
    }
    for (name, v) in names.iter().zip(&adam.v) {
        w.tensor(&format!("adam.v.{name}"), v);
    }

    let crc = crc32fast::hash(&w.0);
    w.u32(crc);
    w.0
}

/// Parses a checkpoint. With `expected`, the stored model must have exactly
/// that architecture; otherwise the stored configuration is used.
pub fn from_bytes(bytes: &[u8], expected: Option<&VectorFieldConfig>) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(Error::CheckpointTruncated("header"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    if bytes.len() < 12 {
        return Err(Error::CheckpointTruncated("checksum"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 8 };
    let image_channels = r.u32("config")? as usize;
    let hidden_channels = r.u32("config")? as usize;
    let mut dilations = [0usize; LAYERS];
    for d in &mut dilations {
        *d = r.u32("config")? as usize;
    }
    let init_seed = r.u64("config")?;
    let zero_output = match r.u8("config")? {
        0 => false,
        1 => true,
        other => {
            return Err(Error::CheckpointTensor {
                name: "config".into(),
                reason: format!("zero-output flag {other}"),
            })
        }
    };
    let steps = r.u32("config")? as usize;
    let run_seed = r.u64("config")?;
    let stored_config = VectorFieldConfig {
        image_channels,
        hidden_channels,
        dilations,
        init_seed,
        zero_output,
    };

    let adam_config = AdamConfig {
        lr: r.f64("adam")?,
        beta1: r.f64("adam")?,
        beta2: r.f64("adam")?,
        epsilon: r.f64("adam")?,
    };
    let t = r.u64("adam")?;

    let stop = match r.u8("stop reason")? {
        0 => None,
        1 => Some(StopReason::MaxEpochs),
        2 => Some(StopReason::EarlyStop),
        3 => Some(StopReason::MaxSteps),
        other => {
            return Err(Error::CheckpointTensor {
                name: "stop reason".into(),
                reason: format!("unknown code {other}"),
            })
        }
    };
    let n_records = r.u32("log")? as usize;
    let mut records = Vec::with_capacity(n_records.min(1 << 16));
    for _ in 0..n_records {
        records.push(EpochRecord {
            epoch: r.u32("log")? as usize,
            train_loss: r.f64("log")?,
            eval_loss: r.f64("log")?,
            eval_psnr: r.f64("log")?,
            lr: r.f64("log")?,
            seconds: 0.0,
        });
    }

    // The architecture to fill: the caller's, with the stored initialisation
    // settings so configs that differ only in how they start still match.
    let target = match expected {
        Some(e) => VectorFieldConfig {
            init_seed,
            zero_output,
            ..e.clone()
        },
        None => stored_config.clone(),
    };
    let mut field = VectorField::<f32>::build(target.clone())?;
    let names = field.parameter_names();
    let shapes: Vec<Shape> = field.parameters().iter().map(|p| p.value().shape()).collect();
    let mut m: Vec<Option<Tensor<f32>>> = vec![None; names.len()];
    let mut v: Vec<Option<Tensor<f32>>> = vec![None; names.len()];

    let n_tensors = r.u32("tensor count")? as usize;
    let mut seen = std::collections::BTreeSet::new();
    {
        let mut state = field.named_state_mut();
        for _ in 0..n_tensors {
            let (name, tensor) = r.tensor()?;
            if !seen.insert(name.clone()) {
                return Err(Error::CheckpointTensor {
                    name,
                    reason: "duplicate record".into(),
                });
            }
            let slot = if let Some(rest) = name.strip_prefix("adam.m.") {
                names.iter().position(|n| n == rest).map(|k| (&mut m[k], shapes[k]))
            } else if let Some(rest) = name.strip_prefix("adam.v.") {
                names.iter().position(|n| n == rest).map(|k| (&mut v[k], shapes[k]))
            } else {
                None
            };
            if let Some((dst, shape)) = slot {
                check_shape(&name, shape, tensor.shape())?;
                *dst = Some(tensor);
                continue;
            }
            let Some((_, dst)) = state.iter_mut().find(|(n, _)| *n == name) else {
                return Err(Error::CheckpointTensor {
                    name,
                    reason: "not part of this model".into(),
                });
            };
            check_shape(&name, dst.shape(), tensor.shape())?;
            **dst = tensor;
        }
        if let Some((name, _)) = state.iter().find(|(n, _)| !seen.contains(n)) {
            return Err(Error::CheckpointTensor {
                name: name.clone(),
                reason: "missing".into(),
            });
        }
    }
    if r.pos != body.len() {
        return Err(Error::CheckpointTensor {
            name: "<trailing>".into(),
            reason: format!("{} unread bytes", body.len() - r.pos),
        });
    }
    if stored_config != target {
        // Shapes matched but the architecture differs (for example dilations).
        return Err(Error::CheckpointTensor {
            name: "config".into(),
            reason: format!("stored {stored_config:?}, expected {target:?}"),
        });
    }

    let moments = |list: Vec<Option<Tensor<f32>>>, kind: &str| -> Result<Vec<Tensor<f32>>> {
        if list.iter().all(Option::is_none) {
            return Ok(Vec::new());
        }
        list.into_iter()
            .zip(&names)
            .map(|(t, n)| {
                t.ok_or_else(|| Error::CheckpointTensor {
                    name: format!("adam.{kind}.{n}"),
                    reason: "missing".into(),
                })
            })
            .collect()
    };
    let adam = Adam {
        config: adam_config,
        t,
        m: moments(m, "m")?,
        v: moments(v, "v")?,
    };
    if adam.m.len() != adam.v.len() {
        return Err(Error::CheckpointTensor {
            name: "adam".into(),
            reason: "first and second moments are not both present".into(),
        });
    }
    Ok(Checkpoint {
        model: Denoiser::new(field, steps),
        adam,
        log: TrainLog { records, stop },
        run_seed,
    })
}

fn check_shape(name: &str, expected: Shape, found: Shape) -> Result<()> {
    if expected != found {
        return Err(Error::CheckpointTensor {
            name: name.into(),
            reason: format!("shape {:?}, expected {:?}", found.dims(), expected.dims()),
        });
    }
    Ok(())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &Denoiser<f32>,
    adam: &Adam,
    log: &TrainLog,
    run_seed: u64,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model, adam, log, run_seed)).map_err(|e| Error::at_path(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&VectorFieldConfig>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::at_path(path, e))?;
    from_bytes(&bytes, expected)
}
