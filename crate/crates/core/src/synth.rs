//! Procedural test images: a smooth gradient background with a few flat
//! rectangles and discs on top, quantized to 8 bits.
//!
//! Every image has its own sub-stream of the seed, so image `i` is the same
//! no matter how many images are generated.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthConfig {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 64,
            channels: 1,
            height: 48,
            width: 48,
            seed: 0,
        }
    }
}

enum Blob {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Disc { cy: f64, cx: f64, r: f64 },
}

impl Blob {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Blob::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Blob::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
        }
    }
}

pub fn synth_image(config: &SynthConfig, index: usize) -> Result<Tensor<f32>> {
    if !matches!(config.channels, 1 | 3) {
        return Err(Error::InvalidArgument(format!(
            "synthetic images need 1 or 3 channels, got {}",
            config.channels
        )));
    }
    let (c, h, w) = (config.channels, config.height, config.width);
    let shape = Shape::new(1, c, h, w)?;
    let mut rng = stream(config.seed, Stream::Synthetic, index as u64);

    let base: Vec<f64> = (0..c).map(|_| rng.random_range(0.2..0.8)).collect();
    let gy: f64 = rng.random_range(-0.3..0.3);
    let gx: f64 = rng.random_range(-0.3..0.3);

    let n_blobs = rng.random_range(3..=6);
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let (hf, wf) = (h as f64, w as f64);
        let blob = if rng.random_bool(0.5) {
            let y0 = rng.random_range(0.0..hf * 0.8);
            let x0 = rng.random_range(0.0..wf * 0.8);
            let y1 = y0 + rng.random_range(hf * 0.15..hf * 0.5);
            let x1 = x0 + rng.random_range(wf * 0.15..wf * 0.5);
            Blob::Rect { y0, x0, y1, x1 }
        } else {
            Blob::Disc {
                cy: rng.random_range(0.0..hf),
                cx: rng.random_range(0.0..wf),
                r: rng.random_range(hf.min(wf) * 0.08..hf.min(wf) * 0.3),
            }
        };
        let colour: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
        blobs.push((blob, colour));
    }

    let mut data = vec![0.0f32; shape.numel()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (yf, xf) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut v = base[ch] + gy * (yf / h as f64 - 0.5) + gx * (xf / w as f64 - 0.5);
                // Later blobs are painted over earlier ones.
                for (blob, colour) in &blobs {
                    if blob.contains(yf, xf) {
                        v = colour[ch];
                    }
                }
                let level = (v.clamp(0.0, 1.0) * 255.0).round();
                data[(ch * h + y) * w + x] = (level / 255.0) as f32;
            }
        }
    }
    Tensor::from_vec(shape, data)
}

pub fn synth_images(config: &SynthConfig) -> Result<Vec<Tensor<f32>>> {
    (0..config.count).map(|i| synth_image(config, i)).collect()
}
