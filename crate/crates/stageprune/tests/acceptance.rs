//! Acceptance gate: runs the full pipeline once at the default desk-scale
//! configuration, then checks every acceptance criterion at its stated
//! tolerance and prints one PASS/FAIL line per criterion.
//!
//! Everything runs inside a single test so the stages share one trained
//! model and the end-to-end wall time can be measured on one core. Run with
//! `cargo test --test acceptance -- --nocapture` to watch the lines appear.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stageprune::calib::{build_stage_calibration, StagePartition};
use stageprune::cli::{cmd_build_db, cmd_compare, cmd_evaluate, cmd_search, cmd_train};
use stageprune::config::ExperimentConfig;
use stageprune::diffusion::model::Denoiser;
use stageprune::diffusion::{
    checkpoint, gaussian_image, sample, DenoiserModel, Image, ModelConfig, NoiseSchedule,
    SamplerConfig, ToyDataset,
};
use stageprune::evo::{
    mutate, search, uniform_schedule, CachedEvaluator, Individual, ScheduleEvaluator, SearchConfig,
};
use stageprune::fitness::{build_reference_cache, energy_distance, ssim};
use stageprune::linalg::{damped_inverse, gram, Matrix};
use stageprune::prune::{
    layerdrop_scores, layerdrop_trajectory, obs_compensation, obs_importance, wanda_prune_layer,
    wanda_scores,
};
use stageprune::routedb::{load_db, materialize_stage_model, memory_report, route};

struct Criterion {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn record(results: &mut Vec<Criterion>, name: &'static str, pass: bool, detail: String) {
    println!("{} — {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    results.push(Criterion { name, pass, detail });
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn reconstruction_error(w_pruned: &Matrix, w: &Matrix, x: &Matrix) -> f64 {
    let full = w.matmul(x).unwrap();
    let pruned = w_pruned.matmul(x).unwrap();
    full.data()
        .iter()
        .zip(pruned.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum()
}

#[test]
fn acceptance() {
    let mut results: Vec<Criterion> = Vec::new();
    let total_clock = Instant::now();

    // ── full pipeline at the default configuration (timed for the runtime
    //    criterion): train → build-db (second-order, 10 stages) →
    //    30-generation search at the 50% target → evaluate.
    let dir = tempfile::tempdir().expect("tempdir");
    let mut cfg = ExperimentConfig {
        output_dir: dir.path().join("run"),
        ..ExperimentConfig::default()
    };
    cfg.search.generations = 30;
    cfg.validate().expect("default config is valid");
    assert_eq!(
        cfg.pipeline.target_level, 8,
        "the headline run uses the 50% target level"
    );
    assert_eq!(cfg.pipeline.stages, 10);

    let clock = Instant::now();
    let train_summary = cmd_train(&cfg).expect("train");
    let train_time = clock.elapsed();
    println!(
        "info: training finished in {train_time:.1?} (loss {:.4} -> {:.4})",
        train_summary.first_epoch_loss, train_summary.final_epoch_loss
    );
    assert!(
        train_summary.loss_ratio < 0.5,
        "default training must at least halve the epoch-1 loss (got ratio {})",
        train_summary.loss_ratio
    );

    let clock = Instant::now();
    let build_report = cmd_build_db(&cfg).expect("build-db");
    let build_time = clock.elapsed();
    println!("info: database built in {build_time:.1?}");

    let clock = Instant::now();
    let search_summary = cmd_search(&cfg).expect("search");
    let search_time = clock.elapsed();
    println!("info: 30-generation search finished in {search_time:.1?}");

    let clock = Instant::now();
    let report = cmd_evaluate(&cfg, None).expect("evaluate");
    let eval_time = clock.elapsed();
    println!("info: evaluation finished in {eval_time:.1?}");

    let model = checkpoint::load(&cfg.checkpoint_path()).expect("checkpoint");
    let db = load_db(&cfg.db_path()).expect("database");
    let sched = NoiseSchedule::linear(
        cfg.schedule.total_steps,
        cfg.schedule.beta_start,
        cfg.schedule.beta_end,
    )
    .unwrap();
    let partition = StagePartition::new(cfg.schedule.total_steps, cfg.pipeline.stages).unwrap();

    // ── budget conservation: 10³ random valid schedules × 100 level-switch
    //    mutations each, mutation magnitude 5; zero violations in < 5 s.
    {
        let clock = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC1);
        let mut violations = 0usize;
        let mut mutations = 0usize;
        for _ in 0..1_000 {
            let n = 2 + rng.random_range(0..15);
            let l_max = 1 + rng.random_range(0..32) as u32;
            let budget = rng.random_range(0..=(n as u32 * l_max));
            let mut ind = Individual::fresh(uniform_schedule(n, l_max, budget).unwrap(), 0);
            // Scramble away from uniform first so the chains start anywhere.
            for g in 0..(2 * n) {
                ind = mutate(&ind, &mut rng, 5.min(l_max), g, 0);
            }
            for g in 0..100 {
                ind = mutate(&ind, &mut rng, 5.min(l_max), g, 0);
                mutations += 1;
                let sum: u32 = ind.schedule.levels.iter().sum();
                if sum != budget || ind.schedule.levels.iter().any(|&l| l > l_max) {
                    violations += 1;
                }
            }
        }
        let elapsed = clock.elapsed();
        record(
            &mut results,
            "budget-conservation",
            violations == 0 && elapsed < Duration::from_secs(5),
            format!("{mutations} mutations, {violations} violations, {elapsed:.2?}"),
        );
    }

    // ── second-order importance, single-column closed form: matches
    //    Σ_i W_ij² / (H⁻¹)_jj within 1e-9 relative on 100 random instances.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC2);
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let d_row = 3 + rng.random_range(0..6);
            let d_in = 4 + rng.random_range(0..7);
            let w = random_matrix(&mut rng, d_row, d_in);
            let x = random_matrix(&mut rng, d_in, 4 * d_in + 5);
            let hinv = damped_inverse(&gram(&x).unwrap(), 0.0).unwrap();
            let j = rng.random_range(0..d_in);
            let importance = obs_importance(&w, &hinv, &[j]).unwrap();
            let closed_form: f64 =
                (0..d_row).map(|i| w.get(i, j) * w.get(i, j)).sum::<f64>() / hinv.get(j, j);
            worst = worst.max((importance - closed_form).abs() / closed_form.abs().max(1e-300));
        }
        record(
            &mut results,
            "obs-single-column-closed-form",
            worst < 1e-9,
            format!("worst relative deviation {worst:.2e} (tolerance 1e-9)"),
        );
    }

    // ── compensation optimality: on 100 random instances and masks the
    //    update never increases the error, and at zero damping the updated
    //    survivors match the normal-equations solve within 1e-8.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC3);
        let mut update_wins = 0usize;
        let mut worst_survivor_dev: f64 = 0.0;
        for _ in 0..100 {
            let d_row = 3 + rng.random_range(0..5);
            let d_in = 5 + rng.random_range(0..6);
            let w = random_matrix(&mut rng, d_row, d_in);
            let x = random_matrix(&mut rng, d_in, 3 * d_in + 7);
            let hinv = damped_inverse(&gram(&x).unwrap(), 0.0).unwrap();
            let mask_size = 1 + rng.random_range(0..3.min(d_in - 1));
            let mut cols: Vec<usize> = (0..d_in).collect();
            for k in 0..mask_size {
                let pick = k + rng.random_range(0..(d_in - k));
                cols.swap(k, pick);
            }
            let mask: Vec<usize> = {
                let mut m = cols[..mask_size].to_vec();
                m.sort_unstable();
                m
            };

            let delta = obs_compensation(&w, &hinv, &mask).unwrap();
            let mut with_update = w.clone();
            let mut without_update = w.clone();
            for r in 0..d_row {
                for c in 0..d_in {
                    with_update.set(r, c, w.get(r, c) + delta.get(r, c));
                }
            }
            for &c in &mask {
                for r in 0..d_row {
                    with_update.set(r, c, 0.0);
                    without_update.set(r, c, 0.0);
                }
            }
            let err_with = reconstruction_error(&with_update, &w, &x);
            let err_without = reconstruction_error(&without_update, &w, &x);
            if err_with <= err_without {
                update_wins += 1;
            }

            // Normal-equations oracle for the survivors.
            let keep: Vec<usize> = (0..d_in).filter(|c| !mask.contains(c)).collect();
            let x_keep = x.select_rows(&keep).unwrap();
            let h_keep_inv = damped_inverse(&gram(&x_keep).unwrap(), 0.0).unwrap();
            let cross = x.matmul(&x_keep.transpose()).unwrap();
            let w_opt = w.matmul(&cross).unwrap().matmul(&h_keep_inv).unwrap();
            for r in 0..d_row {
                for (kc, &c) in keep.iter().enumerate() {
                    worst_survivor_dev =
                        worst_survivor_dev.max((with_update.get(r, c) - w_opt.get(r, kc)).abs());
                }
            }
        }
        record(
            &mut results,
            "obs-compensation-optimality",
            update_wins == 100 && worst_survivor_dev < 1e-8,
            format!(
                "update at least as good in {update_wins}/100 cases; \
                 worst survivor deviation {worst_survivor_dev:.2e} (tolerance 1e-8)"
            ),
        );
    }

    // ── activation-weighted score exactness: equality with a brute-force
    //    double loop on 100 random instances, and bottom-k selection equal
    //    to the full-sort oracle.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC4);
        let mut exact = true;
        let mut selection_ok = true;
        for _ in 0..100 {
            let rows = 2 + rng.random_range(0..9);
            let cols = 2 + rng.random_range(0..9);
            let w = random_matrix(&mut rng, rows, cols);
            let samples = 5 + rng.random_range(0..20);
            let x = random_matrix(&mut rng, cols, samples);
            let groups: Vec<Vec<usize>> = (0..rows).map(|r| vec![r]).collect();
            let scores =
                wanda_scores(&w, &x, &groups, stageprune::prune::wanda::GroupNorm::PerRow).unwrap();
            for i in 0..rows {
                for j in 0..cols {
                    let mut sq = 0.0;
                    for k in 0..x.cols {
                        sq += x.get(j, k) * x.get(j, k);
                    }
                    let expect = w.get(i, j).abs() * sq.sqrt();
                    if scores.elementwise.get(i, j).to_bits() != expect.to_bits() {
                        exact = false;
                    }
                }
            }
            let masks = wanda_prune_layer(&scores, rows);
            let mut order: Vec<usize> = (0..rows).collect();
            order.sort_by(|&a, &b| {
                scores.group_scores[a]
                    .partial_cmp(&scores.group_scores[b])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            for k in 0..=rows {
                let mut expect: Vec<u16> = order[..k].iter().map(|&g| g as u16).collect();
                expect.sort_unstable();
                if masks[k] != expect {
                    selection_ok = false;
                }
            }
        }
        record(
            &mut results,
            "wanda-exactness",
            exact && selection_ok,
            format!(
                "elementwise bitwise equal: {exact}; bottom-k equals sort oracle: {selection_ok}"
            ),
        );
    }

    // ── block-drop identity detection: a synthetic identity block scores a
    //    mean cosine of exactly 1 and is dropped first.
    {
        let mut identity_model = DenoiserModel::new(ModelConfig::default());
        let mc = identity_model.config.clone();
        let ident_block = 1usize;
        // Zeroing both projections turns the block into a pure skip.
        let zero_wo = Matrix::zeros(mc.embed_dim, mc.embed_dim);
        let zero_fc2 = Matrix::zeros(mc.embed_dim, mc.mlp_hidden);
        identity_model.set_block_projections(ident_block, zero_wo, zero_fc2);
        let data = ToyDataset::generate(16, 3);
        let calib = build_stage_calibration(&data, 0, &partition, &sched, 16, 77).unwrap();
        let scores = layerdrop_scores(&identity_model, &calib).unwrap();
        let traj = layerdrop_trajectory(&scores, mc.num_blocks);
        let pass = scores[ident_block].mean_cosine == 1.0 && traj[1] == vec![ident_block as u16];
        record(
            &mut results,
            "layerdrop-identity-detection",
            pass,
            format!(
                "identity block cosine {}, first drop {:?}",
                scores[ident_block].mean_cosine, traj[1]
            ),
        );
    }

    // ── routing equivalence: 20 random schedules sampled through the
    //    routed model match fully materialized per-stage stitched models
    //    within 1e-6 per pixel; loading memory ratio < 0.7 at 10 stages.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACC6);
        let mut worst_pixel_dev: f64 = 0.0;
        for trial in 0..20 {
            let levels: Vec<u32> = (0..cfg.pipeline.stages)
                .map(|_| rng.random_range(0..=16))
                .collect();
            let routed = route(&db, &model, &partition, &levels).unwrap();
            let sampler = SamplerConfig {
                seed: 5000 + trial,
                ..cfg.sampler_config()
            };
            let label = (trial % 4) as usize;
            let from_routed = sample(&routed, &sampler, &sched, label).unwrap();

            let stitched: Vec<DenoiserModel> = (0..cfg.pipeline.stages)
                .map(|s| materialize_stage_model(&db, &model, s, levels[s]).unwrap())
                .collect();
            struct Stitched<'a> {
                models: &'a [DenoiserModel],
                partition: &'a StagePartition,
            }
            impl Denoiser for Stitched<'_> {
                fn predict_eps(&self, x: &Image, t: usize, label: usize) -> Image {
                    self.models[self.partition.stage_of(t).unwrap()].predict_eps(x, t, label)
                }
            }
            let oracle = Stitched {
                models: &stitched,
                partition: &partition,
            };
            let from_stitched = sample(&oracle, &sampler, &sched, label).unwrap();
            for (a, b) in from_routed.pixels().iter().zip(from_stitched.pixels()) {
                worst_pixel_dev = worst_pixel_dev.max((a - b).abs());
            }
        }
        // Loading comparison at the ~40% uniform schedule, 10 stages.
        let forty = uniform_schedule(10, 16, 64).unwrap();
        let mem = memory_report(&db, &forty.levels).unwrap();
        let pass = worst_pixel_dev <= 1e-6 && mem.ratio < 0.7;
        record(
            &mut results,
            "routing-equivalence-and-memory",
            pass,
            format!(
                "worst pixel deviation {worst_pixel_dev:.2e} over 20 schedules; \
                 routing/stitching ratio {:.3} (< 0.7)",
                mem.ratio
            ),
        );
        println!(
            "info: build-time memory report at the 50% uniform schedule: ratio {:.3}",
            build_report.ratio
        );
    }

    // ── elitism monotonicity over 100 generations (economical fitness:
    //    4 fixed latents, 10 sampler steps).
    {
        let sampler = SamplerConfig {
            num_steps: 10,
            eta: 0.0,
            seed: 303,
        };
        let refs = build_reference_cache(&model, &sampler, &sched, 4, 303).unwrap();
        let search_cfg = SearchConfig {
            generations: 100,
            fitness_samples: 4,
            seed: 99,
            ..cfg.search_config()
        };
        let mut evaluator = CachedEvaluator::new(ScheduleEvaluator {
            db: &db,
            backbone: &model,
            partition: &partition,
            sched: &sched,
            sampler: &sampler,
            metric: search_cfg.metric,
            refs: &refs,
        });
        let outcome = search(&search_cfg, &mut evaluator).unwrap();
        let monotone = outcome.history.windows(2).all(|w| w[1].best >= w[0].best);
        let pass = monotone && outcome.history.len() == 101;
        record(
            &mut results,
            "elitism-monotonicity-100-generations",
            pass,
            format!(
                "trace of {} generations monotone: {monotone} \
                 (best {:.4} -> {:.4}, {} evaluations)",
                outcome.history.len() - 1,
                outcome.history[0].best,
                outcome.history.last().unwrap().best,
                outcome.evaluations
            ),
        );
    }

    // ── searched schedule never worse than uniform at the 50% target:
    //    guaranteed by seeding uniform into the population plus elitism,
    //    verified on the full pipeline run.
    {
        let sampler = cfg.sampler_config();
        let search_cfg = cfg.search_config();
        let refs = build_reference_cache(
            &model,
            &sampler,
            &sched,
            search_cfg.fitness_samples,
            cfg.sampler.seed,
        )
        .unwrap();
        let mut evaluator = CachedEvaluator::new(ScheduleEvaluator {
            db: &db,
            backbone: &model,
            partition: &partition,
            sched: &sched,
            sampler: &sampler,
            metric: search_cfg.metric,
            refs: &refs,
        });
        let uniform =
            uniform_schedule(cfg.pipeline.stages, cfg.l_max(), search_cfg.budget()).unwrap();
        let uniform_fitness = evaluator.eval(&uniform.levels).unwrap();
        let pass = search_summary.best_fitness >= uniform_fitness;
        record(
            &mut results,
            "search-at-least-uniform",
            pass,
            format!(
                "best {:.6} vs uniform {:.6} with schedule {:?}",
                search_summary.best_fitness, uniform_fitness, search_summary.best_levels
            ),
        );
    }

    // ── evolutionary vs greedy at a matched evaluation budget, 5 seeds.
    {
        let mut small = cfg.clone();
        small.output_dir = dir.path().join("compare");
        std::fs::create_dir_all(&small.output_dir).unwrap();
        std::fs::copy(cfg.checkpoint_path(), small.checkpoint_path()).unwrap();
        std::fs::copy(cfg.db_path(), small.db_path()).unwrap();
        small.search.generations = 6;
        small.search.fitness_samples = 8;
        let outcome = cmd_compare(&small, 5).unwrap();
        for row in &outcome.rows {
            if row.arm == "greedy" || row.arm == "evolutionary" {
                println!(
                    "info: seed {} {}: fitness {:.6} ({} evaluations, budget {})",
                    row.seed_index, row.arm, row.fitness, row.evaluations, row.evaluation_budget
                );
            }
        }
        let pass = outcome.evolutionary_wins >= 3;
        record(
            &mut results,
            "evolutionary-at-least-greedy",
            pass,
            format!(
                "evolutionary ≥ greedy on {}/5 seeds (need ≥ 3)",
                outcome.evolutionary_wins
            ),
        );
    }

    // ── SSIM self-identity and symmetry, exact, 100 random pairs.
    {
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCA);
        let mut identity_exact = true;
        let mut symmetric_exact = true;
        for _ in 0..100 {
            let mut a = gaussian_image(&mut rng);
            let mut b = gaussian_image(&mut rng);
            a.clamp_unit();
            b.clamp_unit();
            if ssim(&a, &a) != 1.0 {
                identity_exact = false;
            }
            if ssim(&a, &b).to_bits() != ssim(&b, &a).to_bits() {
                symmetric_exact = false;
            }
        }
        record(
            &mut results,
            "ssim-identity-and-symmetry",
            identity_exact && symmetric_exact,
            format!("self-identity exact: {identity_exact}; symmetry exact: {symmetric_exact}"),
        );
    }

    // ── SNR-aware calibration: empirical mean SNR of each stage within 5%
    //    of the closed-form interval average at 10⁴ draws per stage.
    {
        let data = ToyDataset::generate(cfg.dataset.size, cfg.dataset.seed);
        let mut worst_rel: f64 = 0.0;
        for stage in 0..cfg.pipeline.stages {
            let calib =
                build_stage_calibration(&data, stage, &partition, &sched, 10_000, 404).unwrap();
            let empirical = calib.empirical_mean_snr(&sched).unwrap();
            let analytic = partition.interval_mean_snr(stage, &sched).unwrap();
            worst_rel = worst_rel.max((empirical - analytic).abs() / analytic);
        }
        record(
            &mut results,
            "snr-calibration",
            worst_rel < 0.05,
            format!(
                "worst stage deviation {:.2}% (tolerance 5%)",
                100.0 * worst_rel
            ),
        );
    }

    // ── trained sampler beats the noise baseline on energy distance to the
    //    training distribution.
    {
        let data = ToyDataset::generate(cfg.dataset.size, cfg.dataset.seed);
        let reference: Vec<Image> = data.images.iter().take(256).cloned().collect();
        let sampler = cfg.sampler_config();
        let mut generated = Vec::new();
        for i in 0..64usize {
            let cfg_i = SamplerConfig {
                seed: 7000 + i as u64,
                ..sampler.clone()
            };
            generated.push(sample(&model, &cfg_i, &sched, i % 4).unwrap());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0xACCB);
        let noise: Vec<Image> = (0..64)
            .map(|_| {
                let mut img = gaussian_image(&mut rng);
                img.clamp_unit();
                img
            })
            .collect();
        let gen_dist = energy_distance(&generated, &reference).unwrap();
        let noise_dist = energy_distance(&noise, &reference).unwrap();
        record(
            &mut results,
            "sampling-beats-noise-baseline",
            gen_dist < noise_dist,
            format!("energy distance to data: generated {gen_dist:.3} vs noise {noise_dist:.3}"),
        );
    }

    // ── end-to-end runtime on a single core.
    {
        let pipeline_time = train_time + build_time + search_time + eval_time;
        let pass = pipeline_time < Duration::from_secs(45 * 60);
        record(
            &mut results,
            "end-to-end-runtime",
            pass,
            format!(
                "train {train_time:.1?} + build-db {build_time:.1?} + search {search_time:.1?} \
                 + evaluate {eval_time:.1?} = {pipeline_time:.1?} (< 45 min)"
            ),
        );
    }

    println!(
        "info: searched {:?} ssim {:.4} vs uniform {:.4} on fresh evaluation seeds",
        report.searched.schedule,
        report.searched.ssim_vs_dense_mean,
        report.uniform_baseline.ssim_vs_dense_mean
    );
    println!("info: acceptance suite total {:.1?}", total_clock.elapsed());

    let failures: Vec<&Criterion> = results.iter().filter(|c| !c.pass).collect();
    assert!(
        failures.is_empty(),
        "failed criteria: {}",
        failures
            .iter()
            .map(|c| format!("{} ({})", c.name, c.detail))
            .collect::<Vec<_>>()
            .join("; ")
    );
}
