//! Desk-scale denoising diffusion: linear-beta noise schedule, a small
//! block-structured transformer denoiser over 16×16 images, an Adam trainer,
//! and a deterministic DDIM-style sampler.

pub mod checkpoint;
pub mod dataset;
pub mod model;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use dataset::{ShapeClass, ToyDataset};
pub use model::{Denoiser, DenoiserModel, ModelConfig};
pub use sampler::{sample, SamplerConfig};
pub use schedule::{forward_noise, NoiseSchedule};
pub use train::{train, TrainConfig, TrainOutcome};

use crate::error::{Error, Result};

/// Image side length in pixels.
pub const IMG_SIZE: usize = 16;
/// Pixels per image.
pub const IMG_PIXELS: usize = IMG_SIZE * IMG_SIZE;

/// Single-channel 16×16 image with values nominally in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Vec<f64>,
}

impl Image {
    pub fn zeros() -> Self {
        Image {
            data: vec![0.0; IMG_PIXELS],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        if data.len() != IMG_PIXELS {
            return Err(Error::InvalidShape(format!(
                "image needs {IMG_PIXELS} pixels, got {}",
                data.len()
            )));
        }
        Ok(Image { data })
    }

    #[inline]
    pub fn pixels(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * IMG_SIZE + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * IMG_SIZE + x] = v;
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
    }
}

/// Standard-normal image drawn from an explicit RNG stream.
pub fn gaussian_image<R: rand::Rng>(rng: &mut R) -> Image {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..IMG_PIXELS)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Image { data }
}
