//! Experiment configuration: a TOML file with defaults for every key, plus
//! the handful of command-line overrides. The fully resolved configuration
//! is embedded in every report so no default stays hidden.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{ModelConfig, SamplerConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::evo::{InitMode, SearchConfig};
use crate::fitness::MetricId;
use crate::prune::Backend;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub pipeline: PipelineSection,
    pub calib: CalibSection,
    pub train: TrainSection,
    pub sampler: SamplerSection,
    pub search: SearchSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            output_dir: PathBuf::from("out"),
            dataset: DatasetSection::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            pipeline: PipelineSection::default(),
            calib: CalibSection::default(),
            train: TrainSection::default(),
            sampler: SamplerSection::default(),
            search: SearchSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            size: 2000,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub init_seed: u64,
    pub mlp_group_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            init_seed: 11,
            mlp_group_size: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub total_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            total_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub stages: usize,
    pub backend: Backend,
    /// Levels per stage; when absent, 16 for width pruning and the block
    /// count for block dropping.
    pub l_max: Option<u32>,
    pub target_level: u32,
    /// Relative Hessian damping for the second-order backend.
    pub lambda_frac: f64,
}

impl Default for PipelineSection {
    fn default() -> Self {
        PipelineSection {
            stages: 10,
            backend: Backend::Obs,
            l_max: None,
            target_level: 8,
            lambda_frac: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibSection {
    pub size: usize,
    pub seed: u64,
}

impl Default for CalibSection {
    fn default() -> Self {
        CalibSection {
            size: 1024,
            seed: 23,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            seed: t.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub num_steps: usize,
    pub eta: f64,
    /// Base seed for fixed fitness latents (latent `i` uses `seed + i`).
    pub seed: u64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection {
            num_steps: 20,
            eta: 0.0,
            seed: 101,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    pub population_size: usize,
    pub offspring: usize,
    pub survivors: usize,
    pub generations: usize,
    /// Defaults to ~30% of `l_max` when absent.
    pub mutation_magnitude: Option<u32>,
    pub seed: u64,
    pub metric: MetricId,
    pub fitness_samples: usize,
    pub init: InitMode,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            population_size: 20,
            offspring: 16,
            survivors: 4,
            generations: 100,
            mutation_magnitude: None,
            seed: 42,
            metric: MetricId::SsimVsDense,
            fitness_samples: 64,
            init: InitMode::Patterned,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub samples: usize,
    pub seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples: 256,
            seed: 202,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            init_seed: self.model.init_seed,
            mlp_group_size: self.model.mlp_group_size,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            learning_rate: self.train.learning_rate,
            batch_size: self.train.batch_size,
            seed: self.train.seed,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            num_steps: self.sampler.num_steps,
            eta: self.sampler.eta,
            seed: self.sampler.seed,
        }
    }

    /// Levels per stage, defaulted per backend.
    pub fn l_max(&self) -> u32 {
        match self.pipeline.l_max {
            Some(l) => l,
            None => match self.pipeline.backend {
                Backend::LayerDrop => self.model_config().num_blocks as u32,
                _ => 16,
            },
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        let l_max = self.l_max();
        SearchConfig {
            num_stages: self.pipeline.stages,
            l_max,
            target_level: self.pipeline.target_level,
            population_size: self.search.population_size,
            offspring: self.search.offspring,
            survivors: self.search.survivors,
            generations: self.search.generations,
            mutation_magnitude: self
                .search
                .mutation_magnitude
                .unwrap_or_else(|| SearchConfig::default_mutation_magnitude(l_max)),
            seed: self.search.seed,
            metric: self.search.metric,
            fitness_samples: self.search.fitness_samples,
            init: self.search.init,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.schedule.total_steps;
        if self.pipeline.stages == 0 || self.pipeline.stages > t {
            return Err(Error::InvalidConfig(format!(
                "{} stages cannot partition {t} timesteps",
                self.pipeline.stages
            )));
        }
        if self.sampler.num_steps == 0 || !t.is_multiple_of(self.sampler.num_steps) {
            return Err(Error::InvalidConfig(format!(
                "sampler steps {} must divide the schedule length {t}",
                self.sampler.num_steps
            )));
        }
        if !self.sampler.num_steps.is_multiple_of(self.pipeline.stages) {
            return Err(Error::InvalidConfig(format!(
                "sampler steps {} must divide evenly into {} stages",
                self.sampler.num_steps, self.pipeline.stages
            )));
        }
        if self.pipeline.target_level > self.l_max() {
            return Err(Error::InvalidConfig(format!(
                "target level {} exceeds max level {}",
                self.pipeline.target_level,
                self.l_max()
            )));
        }
        if self.pipeline.lambda_frac < 0.0 {
            return Err(Error::InvalidConfig(
                "lambda_frac must be non-negative".into(),
            ));
        }
        self.search_config().validate()?;
        Ok(())
    }

    // Conventional artifact locations inside the output directory.

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.bin")
    }

    pub fn db_path(&self) -> PathBuf {
        self.output_dir.join("model.routedb")
    }

    pub fn schedule_path(&self) -> PathBuf {
        self.output_dir.join("schedule.json")
    }

    pub fn history_path(&self) -> PathBuf {
        self.output_dir.join("history.csv")
    }

    pub fn report_path(&self) -> PathBuf {
        self.output_dir.join("report.json")
    }

    pub fn compare_path(&self) -> PathBuf {
        self.output_dir.join("compare.csv")
    }

    pub fn train_loss_path(&self) -> PathBuf {
        self.output_dir.join("train_loss.csv")
    }

    pub fn memory_path(&self) -> PathBuf {
        self.output_dir.join("memory.json")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back.pipeline.stages, cfg.pipeline.stages);

        let partial: ExperimentConfig = toml::from_str(
            "[pipeline]\nstages = 5\nbackend = \"wanda\"\n\n[sampler]\nnum_steps = 20\n",
        )
        .unwrap();
        assert_eq!(partial.pipeline.stages, 5);
        assert_eq!(partial.pipeline.backend, Backend::Wanda);
        assert_eq!(partial.dataset.size, 2000);
        partial.validate().unwrap();
    }

    #[test]
    fn layerdrop_l_max_defaults_to_block_count() {
        let mut cfg = ExperimentConfig::default();
        cfg.pipeline.backend = Backend::LayerDrop;
        cfg.pipeline.target_level = 2;
        assert_eq!(cfg.l_max(), 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.sampler.num_steps = 7; // neither divides 1000 nor aligns to stages
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.pipeline.target_level = 99;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.search.offspring = 3; // 3 + 4 != 20
        assert!(cfg.validate().is_err());
    }
}
