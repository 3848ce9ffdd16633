//! Stage partitioning of the diffusion trajectory and SNR-matched
//! calibration: each stage's calibration tuples are noised at timesteps
//! drawn from that stage's own interval, so captured activations reflect
//! the noise regime the stage actually operates in.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::model::{CaptureSink, DenoiserModel, DenseRouting};
use crate::diffusion::{forward_noise, gaussian_image, Image, NoiseSchedule, ToyDataset};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Disjoint, contiguous timestep intervals covering `[1, T]`.
///
/// Stage 0 holds the highest timesteps: sampling starts at `t = T`, so the
/// first stage a sampler enters is stage 0. When `T % n != 0` the earlier
/// stages (higher t) take the extra timesteps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePartition {
    pub num_stages: usize,
    /// Inclusive `(lo, hi)` per stage, stage 0 first (highest timesteps).
    pub intervals: Vec<(usize, usize)>,
}

impl StagePartition {
    pub fn new(total_steps: usize, num_stages: usize) -> Result<StagePartition> {
        if num_stages == 0 || num_stages > total_steps {
            return Err(Error::InvalidConfig(format!(
                "cannot split {total_steps} timesteps into {num_stages} stages"
            )));
        }
        let base = total_steps / num_stages;
        let extra = total_steps % num_stages;
        let mut intervals = Vec::with_capacity(num_stages);
        let mut hi = total_steps;
        for stage in 0..num_stages {
            let len = base + usize::from(stage < extra);
            let lo = hi - len + 1;
            intervals.push((lo, hi));
            hi = lo - 1;
        }
        Ok(StagePartition {
            num_stages,
            intervals,
        })
    }

    /// Stage owning timestep `t ∈ [1, T]`.
    pub fn stage_of(&self, t: usize) -> Result<usize> {
        self.intervals
            .iter()
            .position(|&(lo, hi)| t >= lo && t <= hi)
            .ok_or(Error::InvalidTimestep {
                t,
                total: self.intervals[0].1,
            })
    }

    pub fn interval(&self, stage: usize) -> (usize, usize) {
        self.intervals[stage]
    }

    /// Closed-form average SNR over one stage's interval.
    pub fn interval_mean_snr(&self, stage: usize, sched: &NoiseSchedule) -> Result<f64> {
        let (lo, hi) = self.intervals[stage];
        let mut acc = 0.0;
        for t in lo..=hi {
            acc += sched.snr_at(t)?;
        }
        Ok(acc / (hi - lo + 1) as f64)
    }
}

/// One stage's calibration tuples: (noised latent, timestep, label).
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub stage: usize,
    pub seed: u64,
    pub samples: Vec<CalibrationSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSample {
    pub latent: Image,
    pub t: usize,
    pub label: usize,
}

impl CalibrationSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean SNR of the drawn timesteps.
    pub fn empirical_mean_snr(&self, sched: &NoiseSchedule) -> Result<f64> {
        let mut acc = 0.0;
        for s in &self.samples {
            acc += sched.snr_at(s.t)?;
        }
        Ok(acc / self.samples.len() as f64)
    }

    /// Binary blob: header (stage, size, seed) then per-sample t, label, and
    /// raw f64 latent bits. Reload is bit-exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(b"SPCS")?;
        w.write_all(&(self.stage as u32).to_le_bytes())?;
        w.write_all(&(self.samples.len() as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for s in &self.samples {
            w.write_all(&(s.t as u32).to_le_bytes())?;
            w.write_all(&(s.label as u32).to_le_bytes())?;
            for v in s.latent.pixels() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CalibrationSet> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"SPCS" {
            return Err(Error::InvalidInput(format!(
                "{}: not a calibration file",
                path.display()
            )));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u32buf)?;
        let stage = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u32buf)?;
        let count = u32::from_le_bytes(u32buf) as usize;
        r.read_exact(&mut u64buf)?;
        let seed = u64::from_le_bytes(u64buf);
        let mut samples = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u32buf)?;
            let t = u32::from_le_bytes(u32buf) as usize;
            r.read_exact(&mut u32buf)?;
            let label = u32::from_le_bytes(u32buf) as usize;
            let mut latent = Image::zeros();
            for v in latent.pixels_mut() {
                r.read_exact(&mut u64buf)?;
                *v = f64::from_le_bytes(u64buf);
            }
            samples.push(CalibrationSample { latent, t, label });
        }
        Ok(CalibrationSet {
            stage,
            seed,
            samples,
        })
    }
}

/// Draws `size` tuples for one stage: a dataset image picked uniformly, a
/// timestep uniform in the stage interval, fresh Gaussian noise. One
/// (t, noise) draw per image.
pub fn build_stage_calibration(
    data: &ToyDataset,
    stage: usize,
    part: &StagePartition,
    sched: &NoiseSchedule,
    size: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("calibration dataset is empty".into()));
    }
    if size == 0 {
        return Err(Error::InvalidConfig(
            "calibration size must be at least 1".into(),
        ));
    }
    if stage >= part.num_stages {
        return Err(Error::InvalidConfig(format!(
            "stage {stage} out of range for {}-stage partition",
            part.num_stages
        )));
    }
    let (lo, hi) = part.interval(stage);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (stage as u64).wrapping_mul(0x9E3779B97F4A7C15));
    let mut samples = Vec::with_capacity(size);
    for _ in 0..size {
        let idx = rng.random_range(0..data.len());
        let t = rng.random_range(lo..=hi);
        let noise = gaussian_image(&mut rng);
        let latent = forward_noise(&data.images[idx], t, &noise, sched)?;
        samples.push(CalibrationSample {
            latent,
            t,
            label: data.labels[idx],
        });
    }
    Ok(CalibrationSet {
        stage,
        seed,
        samples,
    })
}

/// Per-layer input activations captured over a calibration set.
#[derive(Debug)]
pub struct ActivationBundle {
    pub stage: usize,
    pub sample_count: usize,
    sink: CaptureSink,
    embed_dim: usize,
    mlp_hidden: usize,
}

impl ActivationBundle {
    /// Feature-major activation matrix (`d_in × tokens·samples`) for one
    /// capture point inside one block.
    pub fn matrix(&self, block: usize, point: crate::diffusion::model::CapturePoint) -> Matrix {
        use crate::diffusion::model::CapturePoint as P;
        let dim = match point {
            P::Fc2In => self.mlp_hidden,
            _ => self.embed_dim,
        };
        self.sink.matrix(block, point, dim)
    }
}

/// Runs the dense model over every calibration sample, recording each
/// prunable layer's input matrix. The model itself is never mutated.
pub fn capture_activations(model: &DenoiserModel, calib: &CalibrationSet) -> ActivationBundle {
    let mut sink = CaptureSink::new(model.config.num_blocks);
    for s in &calib.samples {
        model.forward_eps(&s.latent, s.t, s.label, &DenseRouting, Some(&mut sink));
    }
    ActivationBundle {
        stage: calib.stage,
        sample_count: calib.len(),
        sink,
        embed_dim: model.config.embed_dim,
        mlp_hidden: model.config.mlp_hidden,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::model::CapturePoint;
    use crate::diffusion::ModelConfig;
    use crate::linalg::gram;

    fn sched1000() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn partition_covers_range_exactly() {
        for (t_total, n) in [(1000, 10), (1000, 7), (50, 3), (10, 10)] {
            let p = StagePartition::new(t_total, n).unwrap();
            let mut covered = vec![false; t_total + 1];
            let mut lengths = Vec::new();
            for &(lo, hi) in &p.intervals {
                assert!(lo >= 1 && hi <= t_total && lo <= hi);
                for t in lo..=hi {
                    assert!(!covered[t], "timestep {t} covered twice");
                    covered[t] = true;
                }
                lengths.push(hi - lo + 1);
            }
            assert!(
                covered[1..].iter().all(|&c| c),
                "gap in partition {t_total}/{n}"
            );
            let min = lengths.iter().min().unwrap();
            let max = lengths.iter().max().unwrap();
            assert!(max - min <= 1);
        }
    }

    #[test]
    fn stage_zero_holds_highest_timesteps() {
        let p = StagePartition::new(1000, 10).unwrap();
        assert_eq!(p.interval(0), (901, 1000));
        assert_eq!(p.interval(9), (1, 100));
        assert_eq!(p.stage_of(1000).unwrap(), 0);
        assert_eq!(p.stage_of(1).unwrap(), 9);
    }

    #[test]
    fn single_stage_covers_everything() {
        let p = StagePartition::new(1000, 1).unwrap();
        assert_eq!(p.interval(0), (1, 1000));
        let sched = sched1000();
        let data = ToyDataset::generate(16, 1);
        let calib = build_stage_calibration(&data, 0, &p, &sched, 200, 5).unwrap();
        assert!(calib.samples.iter().all(|s| s.t >= 1 && s.t <= 1000));
        // Degenerate partition really does use the whole range.
        assert!(calib.samples.iter().any(|s| s.t <= 500));
        assert!(calib.samples.iter().any(|s| s.t > 500));
    }

    #[test]
    fn drawn_timesteps_stay_in_interval() {
        let p = StagePartition::new(1000, 10).unwrap();
        let sched = sched1000();
        let data = ToyDataset::generate(16, 1);
        let calib = build_stage_calibration(&data, 0, &p, &sched, 1000, 7).unwrap();
        assert!(calib.samples.iter().all(|s| (901..=1000).contains(&s.t)));
    }

    #[test]
    fn calibration_is_deterministic() {
        let p = StagePartition::new(1000, 10).unwrap();
        let sched = sched1000();
        let data = ToyDataset::generate(16, 1);
        let a = build_stage_calibration(&data, 3, &p, &sched, 64, 9).unwrap();
        let b = build_stage_calibration(&data, 3, &p, &sched, 64, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empirical_snr_matches_interval_average() {
        let p = StagePartition::new(1000, 10).unwrap();
        let sched = sched1000();
        let data = ToyDataset::generate(32, 2);
        for stage in [0, 5, 9] {
            let calib = build_stage_calibration(&data, stage, &p, &sched, 10_000, 21).unwrap();
            let empirical = calib.empirical_mean_snr(&sched).unwrap();
            let analytic = p.interval_mean_snr(stage, &sched).unwrap();
            assert!(
                (empirical - analytic).abs() / analytic < 0.05,
                "stage {stage}: empirical {empirical} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn calibration_file_round_trip() {
        let p = StagePartition::new(100, 4).unwrap();
        let sched = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let data = ToyDataset::generate(8, 3);
        let calib = build_stage_calibration(&data, 2, &p, &sched, 16, 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stage2.calib");
        calib.save(&path).unwrap();
        let loaded = CalibrationSet::load(&path).unwrap();
        assert_eq!(loaded, calib);
    }

    #[test]
    fn capture_shapes_and_model_untouched() {
        let model = DenoiserModel::new(ModelConfig::default());
        let before = model.checksum();
        let p = StagePartition::new(100, 4).unwrap();
        let sched = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let data = ToyDataset::generate(4, 3);
        let calib = build_stage_calibration(&data, 1, &p, &sched, 1, 5).unwrap();
        let bundle = capture_activations(&model, &calib);
        // 1 sample × 16 tokens.
        let x = bundle.matrix(0, CapturePoint::QkvIn);
        assert_eq!((x.rows, x.cols), (32, 16));
        let x2 = bundle.matrix(2, CapturePoint::Fc2In);
        assert_eq!((x2.rows, x2.cols), (64, 16));
        assert_eq!(model.checksum(), before);
    }

    #[test]
    fn duplicated_calibration_scales_gram_linearly() {
        let model = DenoiserModel::new(ModelConfig::default());
        let p = StagePartition::new(100, 4).unwrap();
        let sched = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let data = ToyDataset::generate(8, 3);
        let calib = build_stage_calibration(&data, 1, &p, &sched, 8, 5).unwrap();
        let mut doubled = calib.clone();
        doubled.samples.extend(calib.samples.iter().cloned());

        let single = capture_activations(&model, &calib);
        let twice = capture_activations(&model, &doubled);
        let h1 = gram(&single.matrix(0, CapturePoint::ProjIn)).unwrap();
        let h2 = gram(&twice.matrix(0, CapturePoint::ProjIn)).unwrap();
        let n1 = single.matrix(0, CapturePoint::ProjIn).cols as f64;
        let n2 = twice.matrix(0, CapturePoint::ProjIn).cols as f64;
        for i in 0..h1.dim {
            for j in 0..h1.dim {
                let a = h1.get(i, j) / n1;
                let b = h2.get(i, j) / n2;
                assert!((a - b).abs() < 1e-10, "normalized gram drifted: {a} vs {b}");
            }
        }
    }

    #[test]
    fn zero_model_zero_image_gives_zero_first_block_activations() {
        // Zero image and zero parameters force zero timestep/class
        // embeddings, so the first block sees an all-zero input matrix.
        let model = DenoiserModel::zeroed(ModelConfig::default());
        let sched = sched1000();
        let calib = CalibrationSet {
            stage: 0,
            seed: 0,
            samples: vec![CalibrationSample {
                latent: Image::zeros(),
                t: 1000,
                label: 0,
            }],
        };
        let bundle = capture_activations(&model, &calib);
        let x = bundle.matrix(0, CapturePoint::QkvIn);
        assert!(x.data().iter().all(|&v| v == 0.0));
        let _ = sched;
    }

    #[test]
    fn empty_inputs_rejected() {
        let p = StagePartition::new(100, 4).unwrap();
        let sched = NoiseSchedule::linear(100, 1e-3, 0.05).unwrap();
        let empty = ToyDataset::generate(0, 1);
        assert!(matches!(
            build_stage_calibration(&empty, 0, &p, &sched, 8, 1),
            Err(Error::InvalidConfig(_))
        ));
        let data = ToyDataset::generate(4, 1);
        assert!(build_stage_calibration(&data, 0, &p, &sched, 0, 1).is_err());
    }
}
