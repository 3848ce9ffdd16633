//! Fitness metrics for candidate schedules: reference-based SSIM against the
//! dense model's outputs, negated MSE, and a pixel-space energy distance as
//! the distributional measure. All metrics are oriented higher-is-better.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::model::Denoiser;
use crate::diffusion::train::mse_loss;
use crate::diffusion::{sample, DenoiserModel, Image, NoiseSchedule, SamplerConfig, IMG_SIZE};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    SsimVsDense,
    MseVsDense,
    EnergyDistance,
}

impl std::fmt::Display for MetricId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetricId::SsimVsDense => write!(f, "ssim_vs_dense"),
            MetricId::MseVsDense => write!(f, "mse_vs_dense"),
            MetricId::EnergyDistance => write!(f, "energy_distance"),
        }
    }
}

// ─── SSIM ──────────────────────────────────────────────────────────────────

const WINDOW: usize = 7;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; WINDOW * WINDOW] {
    let mut k = [0.0f64; WINDOW * WINDOW];
    let half = (WINDOW / 2) as isize;
    let mut sum = 0.0;
    for dy in -half..=half {
        for dx in -half..=half {
            let v = (-((dx * dx + dy * dy) as f64) / (2.0 * SIGMA * SIGMA)).exp();
            k[((dy + half) as usize) * WINDOW + (dx + half) as usize] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Single-scale SSIM over a 7×7 Gaussian window (σ = 1.5), averaged over
/// every position where the window fits. Inputs in [−1, 1] are remapped to
/// [0, 1] so the stabilizing constants use a unit dynamic range.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    ssim_flat(a.pixels(), b.pixels(), IMG_SIZE, IMG_SIZE).expect("images share a fixed shape")
}

pub fn ssim_flat(a: &[f64], b: &[f64], width: usize, height: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != width * height {
        return Err(Error::InvalidShape(format!(
            "ssim over {}x{} needs {} values, got {} and {}",
            width,
            height,
            width * height,
            a.len(),
            b.len()
        )));
    }
    if width < WINDOW || height < WINDOW {
        return Err(Error::InvalidShape(format!(
            "image {width}x{height} smaller than the {WINDOW}x{WINDOW} window"
        )));
    }
    let kernel = gaussian_kernel();
    let half = WINDOW / 2;
    let remap = |v: f64| (v + 1.0) * 0.5;

    let mut total = 0.0;
    let mut count = 0usize;
    for cy in half..height - half {
        for cx in half..width - half {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for dy in 0..WINDOW {
                for dx in 0..WINDOW {
                    let w = kernel[dy * WINDOW + dx];
                    let pa = remap(a[(cy + dy - half) * width + (cx + dx - half)]);
                    let pb = remap(b[(cy + dy - half) * width + (cx + dx - half)]);
                    mu_a += w * pa;
                    mu_b += w * pb;
                    // The pixel product is formed first so swapping the
                    // arguments rounds identically (exact symmetry).
                    aa += w * (pa * pa);
                    bb += w * (pb * pb);
                    ab += w * (pa * pb);
                }
            }
            let var_a = aa - mu_a * mu_a;
            let var_b = bb - mu_b * mu_b;
            let cov = ab - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + C1) * (2.0 * cov + C2);
            let den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

// ─── energy distance ───────────────────────────────────────────────────────

/// Two-sample energy distance over flattened images (V-statistic form):
/// `2·E‖a−b‖ − E‖a−a′‖ − E‖b−b′‖`. Zero iff the empirical distributions
/// coincide; always non-negative.
pub fn energy_distance(a: &[Image], b: &[Image]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidInput(
            "energy distance needs non-empty sample sets".into(),
        ));
    }
    let cross = mean_pair_distance(a, b);
    let within_a = mean_pair_distance(a, a);
    let within_b = mean_pair_distance(b, b);
    Ok(2.0 * cross - within_a - within_b)
}

fn mean_pair_distance(a: &[Image], b: &[Image]) -> f64 {
    let mut total = 0.0;
    for x in a {
        for y in b {
            let mut s = 0.0;
            for (p, q) in x.pixels().iter().zip(y.pixels()) {
                s += (p - q) * (p - q);
            }
            total += s.sqrt();
        }
    }
    total / (a.len() * b.len()) as f64
}

// ─── reference cache ───────────────────────────────────────────────────────

/// Dense-model outputs for a fixed list of (latent seed, label) pairs,
/// keyed by the backbone checksum, sampler config, and seed list.
#[derive(Debug, Clone)]
pub struct ReferenceCache {
    pub key: u64,
    pub seeds: Vec<u64>,
    pub labels: Vec<usize>,
    pub images: Vec<Image>,
}

pub fn reference_key(model_checksum: u64, sampler: &SamplerConfig, seeds: &[u64]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    let mut feed = |bytes: &[u8]| {
        for &byte in bytes {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    };
    feed(&model_checksum.to_le_bytes());
    feed(&(sampler.num_steps as u64).to_le_bytes());
    feed(&sampler.eta.to_bits().to_le_bytes());
    for s in seeds {
        feed(&s.to_le_bytes());
    }
    hash
}

/// Latent seeds and labels for `k` fixed evaluation pairs.
pub fn fixed_pairs(base_seed: u64, k: usize, num_classes: usize) -> (Vec<u64>, Vec<usize>) {
    let seeds = (0..k as u64).map(|i| base_seed.wrapping_add(i)).collect();
    let labels = (0..k).map(|i| i % num_classes).collect();
    (seeds, labels)
}

/// Samples the dense model once per fixed pair.
pub fn build_reference_cache(
    model: &DenoiserModel,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    k: usize,
    base_seed: u64,
) -> Result<ReferenceCache> {
    if k == 0 {
        return Err(Error::InvalidConfig(
            "reference cache needs at least one pair".into(),
        ));
    }
    let (seeds, labels) = fixed_pairs(base_seed, k, model.config.num_classes);
    let mut images = Vec::with_capacity(k);
    for (seed, label) in seeds.iter().zip(&labels) {
        let cfg = SamplerConfig {
            seed: *seed,
            ..sampler.clone()
        };
        images.push(sample(model, &cfg, sched, *label)?);
    }
    Ok(ReferenceCache {
        key: reference_key(model.checksum(), sampler, &seeds),
        seeds,
        labels,
        images,
    })
}

impl ReferenceCache {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Conventional on-disk location inside an output directory.
    pub fn path_for(dir: &Path, key: u64) -> PathBuf {
        dir.join(format!("refcache-{key:016x}.bin"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"SPRC")?;
        w.write_all(&self.key.to_le_bytes())?;
        w.write_all(&(self.images.len() as u32).to_le_bytes())?;
        for ((seed, label), img) in self.seeds.iter().zip(&self.labels).zip(&self.images) {
            w.write_all(&seed.to_le_bytes())?;
            w.write_all(&(*label as u32).to_le_bytes())?;
            for v in img.pixels() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ReferenceCache> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SPRC" {
            return Err(Error::InvalidInput(format!(
                "{}: not a reference cache",
                path.display()
            )));
        }
        let mut u64buf = [0u8; 8];
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u64buf)?;
        let key = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        let mut seeds = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u64buf)?;
            seeds.push(u64::from_le_bytes(u64buf));
            r.read_exact(&mut u32buf)?;
            labels.push(u32::from_le_bytes(u32buf) as usize);
            let mut img = Image::zeros();
            for v in img.pixels_mut() {
                r.read_exact(&mut u64buf)?;
                *v = f64::from_le_bytes(u64buf);
            }
            images.push(img);
        }
        Ok(ReferenceCache {
            key,
            seeds,
            labels,
            images,
        })
    }
}

// ─── fitness evaluation ────────────────────────────────────────────────────

/// Mean metric over the cache's fixed (seed, label) pairs, higher is better.
/// MSE is negated; the energy metric scores the generated set against the
/// reference set as a whole.
pub fn fitness_eval(
    metric: MetricId,
    model: &dyn Denoiser,
    sampler: &SamplerConfig,
    sched: &NoiseSchedule,
    refs: Option<&ReferenceCache>,
) -> Result<f64> {
    let refs = refs.ok_or_else(|| {
        Error::MissingReference(format!("metric {metric} needs a dense reference cache"))
    })?;
    let mut generated = Vec::with_capacity(refs.len());
    for (seed, label) in refs.seeds.iter().zip(&refs.labels) {
        let cfg = SamplerConfig {
            seed: *seed,
            ..sampler.clone()
        };
        generated.push(sample(model, &cfg, sched, *label)?);
    }
    match metric {
        MetricId::SsimVsDense => {
            let total: f64 = generated
                .iter()
                .zip(&refs.images)
                .map(|(g, r)| ssim(g, r))
                .sum();
            Ok(total / generated.len() as f64)
        }
        MetricId::MseVsDense => {
            let total: f64 = generated
                .iter()
                .zip(&refs.images)
                .map(|(g, r)| mse_loss(g, r))
                .sum();
            Ok(0.0 - total / generated.len() as f64)
        }
        MetricId::EnergyDistance => Ok(0.0 - energy_distance(&generated, &refs.images)?),
    }
}
