//! Procedural 16×16 shape dataset: one of four glyphs per image at random
//! position and scale, rendered with 2×2 supersampling into [−1, 1].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Image, IMG_SIZE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Circle = 0,
    Square = 1,
    Cross = 2,
    Stripe = 3,
}

pub const NUM_CLASSES: usize = 4;

impl ShapeClass {
    pub fn from_index(i: usize) -> ShapeClass {
        match i % NUM_CLASSES {
            0 => ShapeClass::Circle,
            1 => ShapeClass::Square,
            2 => ShapeClass::Cross,
            _ => ShapeClass::Stripe,
        }
    }
}

/// Seed-deterministic dataset: identical seed gives a bitwise-identical
/// image/label sequence.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl ToyDataset {
    pub fn generate(size: usize, seed: u64) -> ToyDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(size);
        let mut labels = Vec::with_capacity(size);
        for i in 0..size {
            let class = ShapeClass::from_index(i);
            images.push(render(class, &mut rng));
            labels.push(class as usize);
        }
        ToyDataset {
            images,
            labels,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn render(class: ShapeClass, rng: &mut ChaCha8Rng) -> Image {
    let cx = rng.random_range(5.0..11.0);
    let cy = rng.random_range(5.0..11.0);
    let radius = rng.random_range(2.5..5.0);
    let inside = |x: f64, y: f64| -> bool {
        match class {
            ShapeClass::Circle => {
                let dx = x - cx;
                let dy = y - cy;
                dx * dx + dy * dy <= radius * radius
            }
            ShapeClass::Square => (x - cx).abs() <= radius && (y - cy).abs() <= radius,
            ShapeClass::Cross => {
                let arm = (radius / 2.5).max(1.0);
                ((x - cx).abs() <= arm && (y - cy).abs() <= radius)
                    || ((y - cy).abs() <= arm && (x - cx).abs() <= radius)
            }
            ShapeClass::Stripe => (y - cy).abs() <= radius / 2.0,
        }
    };
    let mut img = Image::zeros();
    for py in 0..IMG_SIZE {
        for px in 0..IMG_SIZE {
            // 2×2 supersampled coverage, mapped to [−1, 1].
            let mut hits = 0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                if inside(px as f64 + ox, py as f64 + oy) {
                    hits += 1;
                }
            }
            img.set(py, px, -1.0 + 2.0 * hits as f64 / 4.0);
        }
    }
    img
}
