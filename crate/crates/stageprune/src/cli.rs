//! Command implementations behind the `stageprune` binary: train the toy
//! model, build the routing database, search for a schedule, evaluate it,
//! compare search strategies, and report memory accounting. Each command is
//! deterministic given its configuration and seeds.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::calib::{build_stage_calibration, CalibrationSet, StagePartition};
use crate::config::ExperimentConfig;
use crate::diffusion::{
    checkpoint, sample, train, DenoiserModel, NoiseSchedule, SamplerConfig, ToyDataset,
};
use crate::error::{Error, Result};
use crate::evo::{
    greedy_search, init_population, search, uniform_schedule, CachedEvaluator, ScheduleEvaluator,
    SearchConfig,
};
use crate::fitness::{
    build_reference_cache, energy_distance, fitness_eval, reference_key, ssim, MetricId,
    ReferenceCache,
};
use crate::prune::{build_stage_trajectories, Backend};
use crate::routedb::{
    build_db, load_db, memory_report, route, save_db, MemoryReport, RouteDatabase,
};

/// Command-line overrides for config keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub stages: Option<usize>,
    pub backend: Option<Backend>,
    pub target_level: Option<u32>,
    pub generations: Option<usize>,
}

/// Loads the config file (or defaults) and applies flag overrides.
pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        cfg.search.seed = seed;
    }
    if let Some(stages) = overrides.stages {
        cfg.pipeline.stages = stages;
    }
    if let Some(backend) = overrides.backend {
        cfg.pipeline.backend = backend;
    }
    if let Some(target) = overrides.target_level {
        cfg.pipeline.target_level = target;
    }
    if let Some(generations) = overrides.generations {
        cfg.search.generations = generations;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn noise_schedule(cfg: &ExperimentConfig) -> Result<NoiseSchedule> {
    NoiseSchedule::linear(
        cfg.schedule.total_steps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )
}

fn ensure_output_dir(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(())
}

// ─── train ─────────────────────────────────────────────────────────────────

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub epochs: usize,
    pub first_epoch_loss: f64,
    pub final_epoch_loss: f64,
    pub loss_ratio: f64,
}

/// Trains the denoiser and writes the checkpoint plus a per-epoch loss CSV.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let data = ToyDataset::generate(cfg.dataset.size, cfg.dataset.seed);
    let sched = noise_schedule(cfg)?;
    let model = DenoiserModel::new(cfg.model_config());
    let outcome = train(model, &data, &sched, &cfg.train_config())?;

    let ckpt = cfg.checkpoint_path();
    checkpoint::save(&outcome.model, &ckpt)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, loss) in outcome.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", i + 1, loss));
    }
    std::fs::write(cfg.train_loss_path(), csv)?;

    let first = outcome.epoch_losses.first().copied().unwrap_or(f64::NAN);
    let last = outcome.epoch_losses.last().copied().unwrap_or(f64::NAN);
    println!(
        "trained {} epochs: loss {first:.6} -> {last:.6} (ratio {:.3}); checkpoint {}",
        outcome.epoch_losses.len(),
        last / first,
        ckpt.display()
    );
    Ok(TrainSummary {
        checkpoint: ckpt,
        epochs: outcome.epoch_losses.len(),
        first_epoch_loss: first,
        final_epoch_loss: last,
        loss_ratio: last / first,
    })
}

// ─── build-db ──────────────────────────────────────────────────────────────

fn stage_calibrations(
    cfg: &ExperimentConfig,
    sched: &NoiseSchedule,
    partition: &StagePartition,
) -> Result<Vec<CalibrationSet>> {
    let data = ToyDataset::generate(cfg.dataset.size, cfg.dataset.seed);
    (0..cfg.pipeline.stages)
        .map(|stage| {
            build_stage_calibration(
                &data,
                stage,
                partition,
                sched,
                cfg.calib.size,
                cfg.calib.seed,
            )
        })
        .collect()
}

/// Builds per-stage calibrations and trajectories, packs the database, and
/// prints the memory report at the uniform target schedule.
pub fn cmd_build_db(cfg: &ExperimentConfig) -> Result<MemoryReport> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let model = checkpoint::load(&cfg.checkpoint_path())?;
    let sched = noise_schedule(cfg)?;
    let partition = StagePartition::new(cfg.schedule.total_steps, cfg.pipeline.stages)?;
    let calibs = stage_calibrations(cfg, &sched, &partition)?;
    let trajectories = build_stage_trajectories(
        &model,
        cfg.pipeline.backend,
        &calibs,
        cfg.pipeline.lambda_frac,
    )?;
    let db = build_db(&model, &trajectories, cfg.l_max() as usize)?;
    save_db(&db, &cfg.db_path())?;

    let uniform = uniform_schedule(
        cfg.pipeline.stages,
        cfg.l_max(),
        cfg.search_config().budget(),
    )?;
    let report = memory_report(&db, &uniform.levels)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))?;
    std::fs::write(cfg.memory_path(), &json)?;
    println!("{json}");
    println!("database written to {}", cfg.db_path().display());
    Ok(report)
}

// ─── search ────────────────────────────────────────────────────────────────

/// Loads the persisted reference cache for these settings, or builds and
/// persists it.
fn load_or_build_refs(
    cfg: &ExperimentConfig,
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    k: usize,
    base_seed: u64,
) -> Result<ReferenceCache> {
    let sampler = cfg.sampler_config();
    let (seeds, _) = crate::fitness::fixed_pairs(base_seed, k, model.config.num_classes);
    let key = reference_key(model.checksum(), &sampler, &seeds);
    let path = ReferenceCache::path_for(&cfg.output_dir, key);
    if path.exists() {
        let cached = ReferenceCache::load(&path)?;
        if cached.key == key && cached.len() == k {
            return Ok(cached);
        }
    }
    let refs = build_reference_cache(model, &sampler, sched, k, base_seed)?;
    refs.save(&path)?;
    Ok(refs)
}

#[derive(Debug, Serialize)]
pub struct SearchSummary {
    pub best_levels: Vec<u32>,
    pub best_fitness: f64,
    pub evaluations: usize,
    pub generations: usize,
    pub schedule_path: PathBuf,
    pub history_path: PathBuf,
}

/// Runs the evolutionary search against the routing database and writes the
/// best schedule (JSON) and per-generation history (CSV).
pub fn cmd_search(cfg: &ExperimentConfig) -> Result<SearchSummary> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let model = checkpoint::load(&cfg.checkpoint_path())?;
    let db = load_db(&cfg.db_path())?;
    let sched = noise_schedule(cfg)?;
    let partition = StagePartition::new(cfg.schedule.total_steps, cfg.pipeline.stages)?;
    let search_cfg = cfg.search_config();
    let sampler = cfg.sampler_config();
    let refs = load_or_build_refs(
        cfg,
        &model,
        &sched,
        search_cfg.fitness_samples,
        cfg.sampler.seed,
    )?;

    let evaluator = ScheduleEvaluator {
        db: &db,
        backbone: &model,
        partition: &partition,
        sched: &sched,
        sampler: &sampler,
        metric: search_cfg.metric,
        refs: &refs,
    };
    let mut cached = CachedEvaluator::new(evaluator);
    let outcome = search(&search_cfg, &mut cached)?;

    let levels = outcome.best.schedule.levels.clone();
    let schedule_json = serde_json::to_string(&levels)
        .map_err(|e| Error::InvalidInput(format!("schedule serialization: {e}")))?;
    std::fs::write(cfg.schedule_path(), &schedule_json)?;

    let mut csv = String::from("generation,best,mean\n");
    for stat in &outcome.history {
        csv.push_str(&format!(
            "{},{},{}\n",
            stat.generation, stat.best, stat.mean
        ));
    }
    std::fs::write(cfg.history_path(), csv)?;

    let best_fitness = outcome.best.fitness.expect("search evaluates everything");
    println!(
        "search done: best fitness {best_fitness:.6} with schedule {levels:?} ({} evaluations)",
        outcome.evaluations
    );
    Ok(SearchSummary {
        best_levels: levels,
        best_fitness,
        evaluations: outcome.evaluations,
        generations: search_cfg.generations,
        schedule_path: cfg.schedule_path(),
        history_path: cfg.history_path(),
    })
}

// ─── evaluate ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct EvalRow {
    pub schedule: Vec<u32>,
    pub global_sparsity: f64,
    pub per_stage_density: Vec<f64>,
    pub ssim_vs_dense_mean: f64,
    pub energy_distance_vs_dense: f64,
    pub energy_distance_vs_dataset: f64,
}

#[derive(Debug, Serialize)]
pub struct Report {
    pub config: ExperimentConfig,
    pub eval_samples: usize,
    pub eval_seed: u64,
    pub searched: EvalRow,
    pub uniform_baseline: EvalRow,
    pub memory: MemoryReport,
}

struct EvalContext<'a> {
    db: &'a RouteDatabase,
    model: &'a DenoiserModel,
    partition: &'a StagePartition,
    sched: &'a NoiseSchedule,
    sampler: &'a SamplerConfig,
    dense_images: &'a [crate::diffusion::Image],
    dataset_images: &'a [crate::diffusion::Image],
    eval_seed: u64,
}

fn eval_row(ctx: &EvalContext<'_>, levels: &[u32]) -> Result<EvalRow> {
    let routed = route(ctx.db, ctx.model, ctx.partition, levels)?;
    let mut images = Vec::with_capacity(ctx.dense_images.len());
    for (i, _) in ctx.dense_images.iter().enumerate() {
        let cfg_i = SamplerConfig {
            seed: ctx.eval_seed.wrapping_add(i as u64),
            ..ctx.sampler.clone()
        };
        images.push(sample(
            &routed,
            &cfg_i,
            ctx.sched,
            i % ctx.model.config.num_classes,
        )?);
    }
    let ssim_mean = images
        .iter()
        .zip(ctx.dense_images)
        .map(|(a, b)| ssim(a, b))
        .sum::<f64>()
        / images.len() as f64;
    let l_max = ctx.db.l_max as f64;
    Ok(EvalRow {
        schedule: levels.to_vec(),
        global_sparsity: crate::evo::global_sparsity(levels, ctx.db.l_max as u32),
        per_stage_density: levels.iter().map(|&l| 1.0 - l as f64 / l_max).collect(),
        ssim_vs_dense_mean: ssim_mean,
        energy_distance_vs_dense: energy_distance(&images, ctx.dense_images)?,
        energy_distance_vs_dataset: energy_distance(&images, ctx.dataset_images)?,
    })
}

/// Evaluates a schedule (default: the one produced by `search`) against the
/// dense model on fresh evaluation seeds, alongside the uniform baseline.
pub fn cmd_evaluate(cfg: &ExperimentConfig, schedule_file: Option<&Path>) -> Result<Report> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let model = checkpoint::load(&cfg.checkpoint_path())?;
    let db = load_db(&cfg.db_path())?;
    let sched = noise_schedule(cfg)?;
    let partition = StagePartition::new(cfg.schedule.total_steps, cfg.pipeline.stages)?;
    let sampler = cfg.sampler_config();

    let schedule_path = schedule_file
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.schedule_path());
    let text = std::fs::read_to_string(&schedule_path).map_err(|e| {
        Error::InvalidInput(format!(
            "cannot read schedule {}: {e}",
            schedule_path.display()
        ))
    })?;
    let levels: Vec<u32> = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidSchedule(format!("{}: {e}", schedule_path.display())))?;

    // Dense references and a dataset sample for the distributional proxy.
    let k = cfg.eval.samples;
    let mut dense_images = Vec::with_capacity(k);
    for i in 0..k {
        let cfg_i = SamplerConfig {
            seed: cfg.eval.seed.wrapping_add(i as u64),
            ..sampler.clone()
        };
        dense_images.push(sample(
            &model,
            &cfg_i,
            &sched,
            i % model.config.num_classes,
        )?);
    }
    let data = ToyDataset::generate(cfg.dataset.size, cfg.dataset.seed);
    let dataset_images: Vec<_> = data.images.iter().take(k).cloned().collect();

    let ctx = EvalContext {
        db: &db,
        model: &model,
        partition: &partition,
        sched: &sched,
        sampler: &sampler,
        dense_images: &dense_images,
        dataset_images: &dataset_images,
        eval_seed: cfg.eval.seed,
    };
    let searched = eval_row(&ctx, &levels)?;
    let uniform = uniform_schedule(
        cfg.pipeline.stages,
        cfg.l_max(),
        cfg.search_config().budget(),
    )?;
    let uniform_row = eval_row(&ctx, &uniform.levels)?;
    let memory = memory_report(&db, &levels)?;

    let report = Report {
        config: cfg.clone(),
        eval_samples: k,
        eval_seed: cfg.eval.seed,
        searched,
        uniform_baseline: uniform_row,
        memory,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))?;
    std::fs::write(cfg.report_path(), &json)?;
    println!(
        "evaluate: searched ssim {:.4} vs uniform {:.4}; report {}",
        report.searched.ssim_vs_dense_mean,
        report.uniform_baseline.ssim_vs_dense_mean,
        cfg.report_path().display()
    );
    Ok(report)
}

// ─── compare ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct CompareRow {
    pub seed_index: usize,
    pub arm: String,
    pub fitness: f64,
    pub evaluations: usize,
    pub evaluation_budget: usize,
    pub schedule: Vec<u32>,
}

#[derive(Debug, Serialize)]
pub struct CompareOutcome {
    pub rows: Vec<CompareRow>,
    pub evolutionary_wins: usize,
    pub seeds: usize,
}

/// Runs uniform / random-best-of-20 / greedy / evolutionary on matched
/// evaluation budgets across several seeds and writes a CSV with per-seed
/// rows plus per-arm means.
pub fn cmd_compare(cfg: &ExperimentConfig, seeds: usize) -> Result<CompareOutcome> {
    cfg.validate()?;
    ensure_output_dir(cfg)?;
    let model = checkpoint::load(&cfg.checkpoint_path())?;
    let db = load_db(&cfg.db_path())?;
    let sched = noise_schedule(cfg)?;
    let partition = StagePartition::new(cfg.schedule.total_steps, cfg.pipeline.stages)?;
    let base_search = cfg.search_config();
    let sampler = cfg.sampler_config();

    let mut rows = Vec::new();
    let mut evolutionary_wins = 0usize;
    for seed_index in 0..seeds {
        // Fresh fitness latents per seed so the deterministic arms vary too.
        let latent_seed = cfg
            .sampler
            .seed
            .wrapping_add(10_000 * (seed_index as u64 + 1));
        let refs = load_or_build_refs(
            cfg,
            &model,
            &sched,
            base_search.fitness_samples,
            latent_seed,
        )?;
        let search_cfg = SearchConfig {
            seed: base_search.seed.wrapping_add(seed_index as u64),
            ..base_search.clone()
        };
        let budget = search_cfg.evaluation_budget();
        let make_eval = || {
            CachedEvaluator::new(ScheduleEvaluator {
                db: &db,
                backbone: &model,
                partition: &partition,
                sched: &sched,
                sampler: &sampler,
                metric: search_cfg.metric,
                refs: &refs,
            })
        };

        // Uniform.
        let uniform =
            uniform_schedule(search_cfg.num_stages, search_cfg.l_max, search_cfg.budget())?;
        let mut ev = make_eval();
        let uniform_fit = ev.eval(&uniform.levels)?;
        rows.push(CompareRow {
            seed_index,
            arm: "uniform".into(),
            fitness: uniform_fit,
            evaluations: ev.evaluations,
            evaluation_budget: budget,
            schedule: uniform.levels.clone(),
        });

        // Best of 20 random initializations.
        let mut ev = make_eval();
        let random_cfg = SearchConfig {
            population_size: 20,
            offspring: 16,
            survivors: 4,
            init: crate::evo::InitMode::Random,
            ..search_cfg.clone()
        };
        let mut rng = rand::SeedableRng::seed_from_u64(search_cfg.seed ^ 0xA5A5);
        let mut best_random: Option<(f64, Vec<u32>)> = None;
        for ind in init_population(&random_cfg, &mut rng)? {
            let fit = ev.eval(&ind.schedule.levels)?;
            if best_random.as_ref().is_none_or(|(bf, _)| fit > *bf) {
                best_random = Some((fit, ind.schedule.levels.clone()));
            }
        }
        let (rand_fit, rand_levels) = best_random.expect("population non-empty");
        rows.push(CompareRow {
            seed_index,
            arm: "random-best-of-20".into(),
            fitness: rand_fit,
            evaluations: ev.evaluations,
            evaluation_budget: budget,
            schedule: rand_levels,
        });

        // Greedy at the matched budget.
        let mut ev = make_eval();
        let greedy = greedy_search(&search_cfg, &mut ev)?;
        let greedy_fit = greedy.best.fitness.expect("greedy evaluates");
        rows.push(CompareRow {
            seed_index,
            arm: "greedy".into(),
            fitness: greedy_fit,
            evaluations: greedy.evaluations,
            evaluation_budget: budget,
            schedule: greedy.best.schedule.levels.clone(),
        });

        // Evolutionary at the same budget.
        let mut ev = make_eval();
        let evolved = search(&search_cfg, &mut ev)?;
        let evolved_fit = evolved.best.fitness.expect("search evaluates");
        rows.push(CompareRow {
            seed_index,
            arm: "evolutionary".into(),
            fitness: evolved_fit,
            evaluations: evolved.evaluations,
            evaluation_budget: budget,
            schedule: evolved.best.schedule.levels.clone(),
        });
        if evolved_fit >= greedy_fit {
            evolutionary_wins += 1;
        }
    }

    let mut csv = String::from("seed,arm,fitness,evaluations,evaluation_budget,schedule\n");
    for row in &rows {
        let levels: Vec<String> = row.schedule.iter().map(u32::to_string).collect();
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.seed_index,
            row.arm,
            row.fitness,
            row.evaluations,
            row.evaluation_budget,
            levels.join(";")
        ));
    }
    for arm in ["uniform", "random-best-of-20", "greedy", "evolutionary"] {
        let fits: Vec<f64> = rows
            .iter()
            .filter(|r| r.arm == arm)
            .map(|r| r.fitness)
            .collect();
        let mean = fits.iter().sum::<f64>() / fits.len() as f64;
        csv.push_str(&format!("mean,{arm},{mean},,,\n"));
    }
    std::fs::write(cfg.compare_path(), csv)?;
    println!(
        "compare: evolutionary ≥ greedy on {evolutionary_wins}/{seeds} seeds; table {}",
        cfg.compare_path().display()
    );
    Ok(CompareOutcome {
        rows,
        evolutionary_wins,
        seeds,
    })
}

// ─── memory report ─────────────────────────────────────────────────────────

/// Memory accounting for a schedule (default: uniform at the target level).
pub fn cmd_memory_report(
    cfg: &ExperimentConfig,
    schedule_file: Option<&Path>,
) -> Result<MemoryReport> {
    cfg.validate()?;
    let db = load_db(&cfg.db_path())?;
    let levels: Vec<u32> = match schedule_file {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            serde_json::from_str(&text)
                .map_err(|e| Error::InvalidSchedule(format!("{}: {e}", p.display())))?
        }
        None => {
            uniform_schedule(
                cfg.pipeline.stages,
                cfg.l_max(),
                cfg.search_config().budget(),
            )?
            .levels
        }
    };
    let report = memory_report(&db, &levels)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::InvalidInput(format!("report serialization: {e}")))?;
    println!("{json}");
    Ok(report)
}

/// Fitness of an arbitrary level vector against a reference cache.
pub fn fitness_of_levels(
    cfg: &ExperimentConfig,
    model: &DenoiserModel,
    db: &RouteDatabase,
    refs: &ReferenceCache,
    metric: MetricId,
    levels: &[u32],
) -> Result<f64> {
    let sched = noise_schedule(cfg)?;
    let partition = StagePartition::new(cfg.schedule.total_steps, cfg.pipeline.stages)?;
    let routed = route(db, model, &partition, levels)?;
    fitness_eval(metric, &routed, &cfg.sampler_config(), &sched, Some(refs))
}

/// Writes a default config file, handy as a starting point.
pub fn write_default_config(path: &Path) -> Result<()> {
    let cfg = ExperimentConfig::default();
    let text = toml::to_string_pretty(&cfg)
        .map_err(|e| Error::InvalidInput(format!("config serialization: {e}")))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}
