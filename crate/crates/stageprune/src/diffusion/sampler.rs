//! DDIM-style sampler. With `eta = 0` the update is fully deterministic:
//! the seed fixes the initial latent and the trajectory follows from the
//! model alone. Outputs are clipped to [−1, 1] once, at the end.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::Denoiser;
use super::schedule::NoiseSchedule;
use super::{gaussian_image, Image};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            num_steps: 20,
            eta: 0.0,
            seed: 101,
        }
    }
}

/// Samples one image for `label`, starting from a seeded Gaussian latent.
pub fn sample(
    model: &dyn Denoiser,
    cfg: &SamplerConfig,
    sched: &NoiseSchedule,
    label: usize,
) -> Result<Image> {
    let t_total = sched.total_steps;
    if cfg.num_steps == 0 || cfg.num_steps > t_total {
        return Err(Error::InvalidConfig(format!(
            "num_steps {} must lie in [1, {t_total}]",
            cfg.num_steps
        )));
    }
    if !t_total.is_multiple_of(cfg.num_steps) {
        return Err(Error::InvalidConfig(format!(
            "num_steps {} must divide the schedule length {t_total}",
            cfg.num_steps
        )));
    }
    if cfg.eta < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "eta {} must be non-negative",
            cfg.eta
        )));
    }

    let ratio = t_total / cfg.num_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = gaussian_image(&mut rng);

    for i in 0..cfg.num_steps {
        let t = t_total - i * ratio;
        let t_prev = t - ratio;
        let eps = model.predict_eps(&x, t, label);
        let a_t = sched.alpha_bar_at(t)?;
        let a_prev = sched.alpha_bar_at(t_prev)?;

        let sqrt_at = a_t.sqrt();
        let sqrt_one_minus_at = (1.0 - a_t).sqrt();
        let sigma = if cfg.eta > 0.0 {
            cfg.eta * ((1.0 - a_prev) / (1.0 - a_t)).sqrt() * (1.0 - a_t / a_prev).sqrt()
        } else {
            0.0
        };
        let dir_coeff = (1.0 - a_prev - sigma * sigma).max(0.0).sqrt();
        let noise = if sigma > 0.0 {
            Some(gaussian_image(&mut rng))
        } else {
            None
        };

        for (idx, xv) in x.pixels_mut().iter_mut().enumerate() {
            let e = eps.pixels()[idx];
            let x0_hat = (*xv - sqrt_one_minus_at * e) / sqrt_at;
            let mut next = a_prev.sqrt() * x0_hat + dir_coeff * e;
            if let Some(n) = &noise {
                next += sigma * n.pixels()[idx];
            }
            *xv = next;
        }
    }
    x.clamp_unit();
    Ok(x)
}
