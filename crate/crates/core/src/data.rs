//! Training pairs: patch extraction, Gaussian noise and augmentation.
//!
//! Images are `[1, c, h, w]` tensors with values in `[0, 1]`; noise levels
//! are given on the 0-255 scale and divided by 255. Noisy values are not
//! clipped.
//!
//! Randomness comes from named sub-streams of the run seed (see
//! [`crate::rng`]): crops per source image, eval noise per patch, train noise
//! per epoch. Train noise is redrawn every epoch, eval noise is drawn once.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{Shape, Tensor};

pub const PIXEL_SCALE: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NoiseSpec {
    /// A single noise level.
    Fixed { sigma: f64 },
    /// A noise level drawn uniformly from `[lo, hi]` for every patch.
    Blind { lo: f64, hi: f64 },
}

impl NoiseSpec {
    pub fn fixed(sigma: f64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("noise level {sigma} must be >= 0")));
        }
        Ok(NoiseSpec::Fixed { sigma })
    }

    pub fn blind(lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::InvalidArgument(format!("blind range {lo}:{hi} needs 0 <= lo < hi")));
        }
        Ok(NoiseSpec::Blind { lo, hi })
    }

    /// Noise level for one patch, on the 0-255 scale.
    pub fn draw_sigma(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            NoiseSpec::Fixed { sigma } => sigma,
            NoiseSpec::Blind { lo, hi } => rng.random_range(lo..=hi),
        }
    }
}

impl std::fmt::Display for NoiseSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseSpec::Fixed { sigma } => write!(f, "{sigma}"),
            NoiseSpec::Blind { lo, hi } => write!(f, "{lo}:{hi}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_size: usize,
    pub patches_per_image: usize,
}

impl Default for PatchSpec {
    /// Desk-scale defaults: 32 patches of 32x32 per image.
    fn default() -> Self {
        PatchSpec {
            patch_size: 32,
            patches_per_image: 32,
        }
    }
}

impl PatchSpec {
    /// The full-scale setting: 300 patches of 60x60 per image.
    pub fn full_scale() -> Self {
        PatchSpec {
            patch_size: 60,
            patches_per_image: 300,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    /// Index of the source image.
    pub source: usize,
    /// Index into the eight variants of [`augment`] (0 = original).
    pub variant: usize,
    /// Top-left corner `(y, x)` of the crop.
    pub origin: (usize, usize),
    /// Noise level used, once one has been drawn.
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub clean: Tensor<f32>,
    pub noisy: Option<Tensor<f32>>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub split: Split,
    pub patches: Vec<Patch>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn sources(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.patches.iter().map(|p| p.provenance.source).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// Stacks the clean (and, if present, noisy) tensors of `indices`.
    pub fn gather(&self, indices: &[usize]) -> Result<(Option<Tensor<f32>>, Tensor<f32>)> {
        let clean: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.patches[i].clean).collect();
        let noisy: Option<Vec<&Tensor<f32>>> = indices.iter().map(|&i| self.patches[i].noisy.as_ref()).collect();
        let noisy = noisy.map(|n| Tensor::stack(&n)).transpose()?;
        Ok((noisy, Tensor::stack(&clean)?))
    }

    /// One CSV line per patch: `split,source,variant,y,x,sigma`.
    pub fn manifest_lines(&self) -> Vec<String> {
        self.patches
            .iter()
            .map(|p| {
                let pr = &p.provenance;
                let sigma = pr.sigma.map(|s| s.to_string()).unwrap_or_default();
                format!(
                    "{},{},{},{},{},{}",
                    self.split.as_str(),
                    pr.source,
                    pr.variant,
                    pr.origin.0,
                    pr.origin.1,
                    sigma
                )
            })
            .collect()
    }
}

pub const MANIFEST_HEADER: &str = "split,source,variant,y,x,sigma";

/// Crops `spec.patches_per_image` squares at uniformly random positions.
pub fn extract_patches(
    image: &Tensor<f32>,
    source: usize,
    variant: usize,
    spec: PatchSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Patch>> {
    let s = image.shape();
    let p = spec.patch_size;
    if p == 0 || spec.patches_per_image == 0 {
        return Err(Error::InvalidArgument("patch size and patches per image must be positive".into()));
    }
    if s.batch != 1 {
        return Err(Error::shape("extract_patches", "batch", 1, s.batch));
    }
    if s.height < p || s.width < p {
        return Err(Error::ImageTooSmall {
            required: p,
            height: s.height,
            width: s.width,
        });
    }
    let shape = Shape::new(1, s.channels, p, p)?;
    (0..spec.patches_per_image)
        .map(|_| {
            let y = rng.random_range(0..=s.height - p);
            let x = rng.random_range(0..=s.width - p);
            Ok(Patch {
                clean: crop(image, y, x, shape)?,
                noisy: None,
                provenance: Provenance {
                    source,
                    variant,
                    origin: (y, x),
                    sigma: None,
                },
            })
        })
        .collect()
}

fn crop(image: &Tensor<f32>, y0: usize, x0: usize, shape: Shape) -> Result<Tensor<f32>> {
    let s = image.shape();
    let mut data = Vec::with_capacity(shape.numel());
    for c in 0..s.channels {
        for y in y0..y0 + shape.height {
            let row = (c * s.height + y) * s.width;
            data.extend_from_slice(&image.data()[row + x0..row + x0 + shape.width]);
        }
    }
    Tensor::from_vec(shape, data)
}

/// Adds i.i.d. `N(0, (sigma / 255)^2)` noise to every value; returns the
/// noisy tensor and the sigma used (0-255 scale).
pub fn add_gaussian_noise(clean: &Tensor<f32>, spec: &NoiseSpec, rng: &mut ChaCha8Rng) -> (Tensor<f32>, f64) {
    let sigma = spec.draw_sigma(rng);
    (add_noise_with_sigma(clean, sigma, rng), sigma)
}

pub fn add_noise_with_sigma(clean: &Tensor<f32>, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    if sigma == 0.0 {
        return clean.clone();
    }
    let std = sigma / PIXEL_SCALE;
    let mut out = clean.clone();
    for v in out.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v as f64 + std * z) as f32;
    }
    out
}

/// Rotates every plane by 90 degrees counter-clockwise.
pub fn rot90(image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape();
    let out_shape = Shape {
        height: s.width,
        width: s.height,
        ..s
    };
    let mut out = Tensor::zeros(out_shape);
    for b in 0..s.batch {
        for c in 0..s.channels {
            for y in 0..s.height {
                for x in 0..s.width {
                    out.set(b, c, s.width - 1 - x, y, image.get(b, c, y, x));
                }
            }
        }
    }
    out
}

/// Mirrors left-right.
pub fn flip_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let w = image.shape().width;
    let mut out = image.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Mirrors top-bottom.
pub fn flip_vertical(image: &Tensor<f32>) -> Tensor<f32> {
    let s = image.shape();
    let mut out = image.clone();
    for plane in out.data_mut().chunks_mut(s.plane()) {
        let rows: Vec<Vec<f32>> = plane.chunks(s.width).rev().map(<[f32]>::to_vec).collect();
        for (dst, src) in plane.chunks_mut(s.width).zip(rows) {
            dst.copy_from_slice(&src);
        }
    }
    out
}

/// The eight variants `{0, 90, 180, 270 degrees} x {no flip, horizontal flip}`,
/// in that order (rotation first, then the optional flip).
pub fn augment(image: &Tensor<f32>) -> Vec<Tensor<f32>> {
    let mut rotations = Vec::with_capacity(4);
    let mut current = image.clone();
    for _ in 0..4 {
        let next = rot90(&current);
        rotations.push(current);
        current = next;
    }
    let mut out = Vec::with_capacity(8);
    out.extend(rotations.iter().cloned());
    out.extend(rotations.iter().map(flip_horizontal));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub patch: PatchSpec,
    pub noise: NoiseSpec,
    pub augment: bool,
    /// Fraction of source images held out for evaluation.
    pub eval_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            patch: PatchSpec::default(),
            noise: NoiseSpec::Fixed { sigma: 25.0 },
            augment: false,
            eval_fraction: 0.125,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: PatchSet,
    pub eval: PatchSet,
    pub noise: NoiseSpec,
    pub seed: u64,
}

/// Splits source images into train/eval before cropping (no image feeds
/// both sides), crops patches and fixes the eval noise.
pub fn make_dataset(images: &[Tensor<f32>], config: &DatasetConfig) -> Result<Dataset> {
    if images.len() < 2 {
        return Err(Error::NotEnoughImages {
            required: 2,
            found: images.len(),
        });
    }
    if !(config.eval_fraction > 0.0 && config.eval_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "eval fraction {} must lie in (0, 1)",
            config.eval_fraction
        )));
    }
    let n = images.len();
    let n_eval = (n as f64 * config.eval_fraction).round() as usize;
    if n_eval == 0 || n_eval == n {
        let required = ((1.0 / config.eval_fraction.min(1.0 - config.eval_fraction)).ceil() as usize).max(2);
        return Err(Error::NotEnoughImages { required, found: n });
    }
    let channels = images[0].shape().channels;
    if let Some(bad) = images.iter().find(|im| im.shape().channels != channels) {
        return Err(Error::ChannelMismatch {
            expected: channels,
            found: bad.shape().channels,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(config.seed, Stream::Split, 0));
    let mut eval_ids = order[..n_eval].to_vec();
    let mut train_ids = order[n_eval..].to_vec();
    eval_ids.sort_unstable();
    train_ids.sort_unstable();

    let patches_for = |ids: &[usize]| -> Result<Vec<Patch>> {
        let mut out = Vec::new();
        for &id in ids {
            let variants = if config.augment {
                augment(&images[id])
            } else {
                vec![images[id].clone()]
            };
            for (v, img) in variants.iter().enumerate() {
                let mut rng = stream(config.seed, Stream::Crops, (id * 8 + v) as u64);
                out.extend(extract_patches(img, id, v, config.patch, &mut rng)?);
            }
        }
        Ok(out)
    };

    let train = PatchSet {
        split: Split::Train,
        patches: patches_for(&train_ids)?,
    };
    let mut eval = PatchSet {
        split: Split::Eval,
        patches: patches_for(&eval_ids)?,
    };
    for (i, p) in eval.patches.iter_mut().enumerate() {
        let mut rng = stream(config.seed, Stream::EvalNoise, i as u64);
        let (noisy, sigma) = add_gaussian_noise(&p.clean, &config.noise, &mut rng);
        p.noisy = Some(noisy);
        p.provenance.sigma = Some(sigma);
    }
    Ok(Dataset {
        train,
        eval,
        noise: config.noise,
        seed: config.seed,
    })
}

impl Dataset {
    /// Random stream for the training noise of one epoch.
    pub fn epoch_noise(&self, epoch: usize) -> ChaCha8Rng {
        stream(self.seed, Stream::TrainNoise, epoch as u64)
    }

    /// Clean patches of `indices` with fresh noise drawn from `rng`.
    /// Returns `(noisy, clean, sigmas)`.
    pub fn noisy_train_batch(&self, indices: &[usize], rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>, Vec<f64>)> {
        let (_, clean) = self.train.gather(indices)?;
        let mut noisy = Vec::with_capacity(indices.len());
        let mut sigmas = Vec::with_capacity(indices.len());
        for &i in indices {
            let (n, s) = add_gaussian_noise(&self.train.patches[i].clean, &self.noise, rng);
            noisy.push(n);
            sigmas.push(s);
        }
        let refs: Vec<&Tensor<f32>> = noisy.iter().collect();
        Ok((Tensor::stack(&refs)?, clean, sigmas))
    }

    pub fn manifest(&self) -> Vec<String> {
        let mut lines = vec![MANIFEST_HEADER.to_string()];
        lines.extend(self.train.manifest_lines());
        lines.extend(self.eval.manifest_lines());
        lines
    }
}
