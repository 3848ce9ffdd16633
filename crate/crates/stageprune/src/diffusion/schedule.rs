//! Linear-beta noise schedule with cumulative products and per-step SNR.

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Forward-process schedule over timesteps `t ∈ [1, T]`.
///
/// `beta`, `alpha_bar`, and `snr` are indexed by `t − 1`; `alpha_bar_at(0)`
/// is defined as 1 (the no-noise limit used by the sampler's final step).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub total_steps: usize,
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub snr: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear interpolation of beta from `beta_start` to `beta_end` over `T`
    /// steps, with `ᾱ_t = Π(1 − β_s)` and `snr_t = ᾱ_t / (1 − ᾱ_t)`.
    pub fn linear(total_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::InvalidConfig(format!(
                "schedule needs at least 2 steps, got {total_steps}"
            )));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "beta range ({beta_start}, {beta_end}) must satisfy 0 < start <= end < 1"
            )));
        }
        let mut beta = Vec::with_capacity(total_steps);
        let mut alpha_bar = Vec::with_capacity(total_steps);
        let mut snr = Vec::with_capacity(total_steps);
        let mut product = 1.0f64;
        for i in 0..total_steps {
            let frac = if total_steps == 1 {
                0.0
            } else {
                i as f64 / (total_steps - 1) as f64
            };
            let b = beta_start + (beta_end - beta_start) * frac;
            product *= 1.0 - b;
            beta.push(b);
            alpha_bar.push(product);
            snr.push(product / (1.0 - product));
        }
        let sched = NoiseSchedule {
            total_steps,
            beta,
            alpha_bar,
            snr,
        };
        sched.validate()?;
        Ok(sched)
    }

    fn validate(&self) -> Result<()> {
        for t in 1..self.total_steps {
            if self.alpha_bar[t] >= self.alpha_bar[t - 1] {
                return Err(Error::InvalidConfig(format!(
                    "alpha_bar not strictly decreasing at t={}",
                    t + 1
                )));
            }
            if self.snr[t] >= self.snr[t - 1] {
                return Err(Error::InvalidConfig(format!(
                    "snr not strictly decreasing at t={}",
                    t + 1
                )));
            }
        }
        if !self.snr.iter().all(|s| s.is_finite()) {
            return Err(Error::InvalidConfig("non-finite snr".into()));
        }
        Ok(())
    }

    /// `ᾱ_t` with the `t = 0` convention `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> Result<f64> {
        if t == 0 {
            return Ok(1.0);
        }
        if t > self.total_steps {
            return Err(Error::InvalidTimestep {
                t,
                total: self.total_steps,
            });
        }
        Ok(self.alpha_bar[t - 1])
    }

    pub fn snr_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.total_steps {
            return Err(Error::InvalidTimestep {
                t,
                total: self.total_steps,
            });
        }
        Ok(self.snr[t - 1])
    }
}

/// `x_t = √ᾱ_t·x₀ + √(1 − ᾱ_t)·ε` for `t ∈ [1, T]`.
pub fn forward_noise(x0: &Image, t: usize, noise: &Image, sched: &NoiseSchedule) -> Result<Image> {
    if t == 0 || t > sched.total_steps {
        return Err(Error::InvalidTimestep {
            t,
            total: sched.total_steps,
        });
    }
    Ok(forward_noise_with_alpha_bar(
        x0,
        sched.alpha_bar[t - 1],
        noise,
    ))
}

/// Core mixing step, exposed for the `ᾱ → 1` limit.
pub fn forward_noise_with_alpha_bar(x0: &Image, alpha_bar: f64, noise: &Image) -> Image {
    let signal = alpha_bar.sqrt();
    let sigma = (1.0 - alpha_bar).sqrt();
    let mut out = Image::zeros();
    for ((o, &a), &n) in out
        .pixels_mut()
        .iter_mut()
        .zip(x0.pixels())
        .zip(noise.pixels())
    {
        *o = signal * a + sigma * n;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{gaussian_image, IMG_PIXELS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_step_hand_computation() {
        let s = NoiseSchedule::linear(2, 0.5, 0.5).unwrap();
        assert!((s.alpha_bar[0] - 0.5).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.25).abs() < 1e-15);
        assert!((s.snr[0] - 1.0).abs() < 1e-15);
        assert!((s.snr[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn snr_monotone() {
        let s = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        assert!(s.snr_at(1).unwrap() > s.snr_at(100).unwrap());
        for t in 2..=100 {
            assert!(s.snr_at(t).unwrap() < s.snr_at(t - 1).unwrap());
        }
    }

    #[test]
    fn default_schedule_ends_nearly_noiseless() {
        // Direct product evaluation of the standard 1000-step range.
        let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        assert!(s.alpha_bar[999] < 1e-4);
        let mut product = 1.0;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 999.0;
            product *= 1.0 - beta;
        }
        assert!((s.alpha_bar[999] - product).abs() < 1e-15);
    }

    #[test]
    fn invalid_ranges_rejected() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 0.2).is_err());
        assert!(NoiseSchedule::linear(10, 0.5, 1.0).is_err());
    }

    #[test]
    fn noise_limit_returns_x0_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0 = gaussian_image(&mut rng);
        let noise = gaussian_image(&mut rng);
        let out = forward_noise_with_alpha_bar(&x0, 1.0, &noise);
        assert_eq!(out.pixels(), x0.pixels());
    }

    #[test]
    fn zero_signal_is_scaled_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = gaussian_image(&mut rng);
        let sched = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let t = 60;
        let out = forward_noise(&Image::zeros(), t, &noise, &sched).unwrap();
        let sigma = (1.0 - sched.alpha_bar[t - 1]).sqrt();
        for (o, n) in out.pixels().iter().zip(noise.pixels()) {
            assert_eq!(*o, sigma * n);
        }
    }

    #[test]
    fn timestep_bounds_checked() {
        let sched = NoiseSchedule::linear(10, 1e-3, 0.05).unwrap();
        let x = Image::zeros();
        assert!(forward_noise(&x, 0, &x, &sched).is_err());
        assert!(forward_noise(&x, 11, &x, &sched).is_err());
        assert!(forward_noise(&x, 10, &x, &sched).is_ok());
    }

    #[test]
    fn monte_carlo_moments_match_schedule() {
        // Over many draws at fixed t with x0 ≡ 1, the per-pixel mean is √ᾱ_t
        // and the variance is 1 − ᾱ_t, within 5%.
        let sched = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let t = 500;
        let mut ones = Image::zeros();
        ones.pixels_mut().iter_mut().for_each(|v| *v = 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let draws = 40; // 40 images × 256 pixels = 10240 samples
        let mut values = Vec::with_capacity(draws * IMG_PIXELS);
        for _ in 0..draws {
            let noise = gaussian_image(&mut rng);
            let out = forward_noise(&ones, t, &noise, &sched).unwrap();
            values.extend_from_slice(out.pixels());
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect_mean = sched.alpha_bar[t - 1].sqrt();
        let expect_var = 1.0 - sched.alpha_bar[t - 1];
        assert!(
            (mean - expect_mean).abs() / expect_mean < 0.05,
            "mean {mean} vs {expect_mean}"
        );
        assert!(
            (var - expect_var).abs() / expect_var < 0.05,
            "var {var} vs {expect_var}"
        );
    }
}
