//! Budget-preserving evolutionary search over stage-wise sparsity schedules,
//! plus the greedy hill-climbing baseline run at a matched evaluation budget.
//!
//! A schedule assigns an integer sparsity level to each stage; the sum is
//! pinned to the budget `B = n·L_t` and every mutation is a level switch
//! that moves Δ levels from one stage to another, so the global sparsity
//! never drifts. Selection keeps the best `survivors` unchanged (elitism)
//! and refills the population with mutants of randomly chosen survivors.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calib::StagePartition;
use crate::diffusion::{DenoiserModel, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::fitness::{fitness_eval, MetricId, ReferenceCache};
use crate::routedb::{route, RouteDatabase};

/// Integer per-stage sparsity levels under a fixed global budget.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SparsitySchedule {
    pub levels: Vec<u32>,
    pub l_max: u32,
    pub budget: u32,
}

impl SparsitySchedule {
    pub fn new(levels: Vec<u32>, l_max: u32, budget: u32) -> Result<SparsitySchedule> {
        let s = SparsitySchedule {
            levels,
            l_max,
            budget,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&bad) = self.levels.iter().find(|&&l| l > self.l_max) {
            return Err(Error::InvalidSchedule(format!(
                "level {bad} exceeds the bound {}",
                self.l_max
            )));
        }
        let sum: u32 = self.levels.iter().sum();
        if sum != self.budget {
            return Err(Error::InvalidSchedule(format!(
                "levels sum to {sum}, budget is {}",
                self.budget
            )));
        }
        Ok(())
    }

    /// Global sparsity fraction `(1/n)·Σ L_i / L_max`.
    pub fn global_sparsity(&self) -> f64 {
        if self.levels.is_empty() || self.l_max == 0 {
            return 0.0;
        }
        let sum: u32 = self.levels.iter().sum();
        sum as f64 / (self.levels.len() as f64 * self.l_max as f64)
    }
}

/// Equal levels up to integrality: the first `B mod n` stages get one extra.
pub fn uniform_schedule(num_stages: usize, l_max: u32, budget: u32) -> Result<SparsitySchedule> {
    if budget > num_stages as u32 * l_max {
        return Err(Error::InvalidConfig(format!(
            "budget {budget} infeasible for {num_stages} stages at max level {l_max}"
        )));
    }
    let base = budget / num_stages as u32;
    let extra = (budget % num_stages as u32) as usize;
    let levels = (0..num_stages)
        .map(|i| base + u32::from(i < extra))
        .collect();
    SparsitySchedule::new(levels, l_max, budget)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Uniform,
    Random,
    Patterned,
}

/// A candidate schedule with cached fitness and lineage.
#[derive(Debug, Clone)]
pub struct Individual {
    pub schedule: SparsitySchedule,
    pub fitness: Option<f64>,
    pub generation: usize,
    /// Index of the parent in the previous population, if mutated.
    pub parent: Option<usize>,
    /// Set when mutation could not find a feasible switch and returned the
    /// parent unchanged.
    pub stuck: bool,
}

impl Individual {
    pub fn fresh(schedule: SparsitySchedule, generation: usize) -> Individual {
        Individual {
            schedule,
            fitness: None,
            generation,
            parent: None,
            stuck: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub num_stages: usize,
    pub l_max: u32,
    pub target_level: u32,
    pub population_size: usize,
    pub offspring: usize,
    pub survivors: usize,
    pub generations: usize,
    /// Maximum level-switch magnitude; defaults to ~30% of `l_max`.
    pub mutation_magnitude: u32,
    pub seed: u64,
    pub metric: MetricId,
    pub fitness_samples: usize,
    pub init: InitMode,
}

impl SearchConfig {
    pub fn budget(&self) -> u32 {
        self.num_stages as u32 * self.target_level
    }

    /// Maximum distinct schedule evaluations a run may spend: the initial
    /// population plus one per offspring per generation. The greedy baseline
    /// is capped at the same number.
    pub fn evaluation_budget(&self) -> usize {
        self.population_size + self.offspring * self.generations
    }

    pub fn default_mutation_magnitude(l_max: u32) -> u32 {
        ((0.3 * l_max as f64).round() as u32).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_stages == 0 {
            return Err(Error::InvalidConfig("need at least one stage".into()));
        }
        if self.offspring + self.survivors != self.population_size {
            return Err(Error::InvalidConfig(format!(
                "offspring {} + survivors {} must equal population {}",
                self.offspring, self.survivors, self.population_size
            )));
        }
        if self.survivors == 0 {
            return Err(Error::InvalidConfig("need at least one survivor".into()));
        }
        if self.mutation_magnitude == 0 || self.mutation_magnitude > self.l_max {
            return Err(Error::InvalidConfig(format!(
                "mutation magnitude {} must lie in [1, {}]",
                self.mutation_magnitude, self.l_max
            )));
        }
        if self.target_level > self.l_max {
            return Err(Error::InvalidConfig(format!(
                "target level {} exceeds max level {}",
                self.target_level, self.l_max
            )));
        }
        if self.fitness_samples == 0 {
            return Err(Error::InvalidConfig(
                "fitness_samples must be positive".into(),
            ));
        }
        Ok(())
    }
}

// ─── initialization ────────────────────────────────────────────────────────

/// Builds the initial population. The uniform schedule always occupies
/// slot 0, so elitism guarantees the search never ends below it.
pub fn init_population(cfg: &SearchConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Individual>> {
    cfg.validate()?;
    let budget = cfg.budget();
    let uniform = uniform_schedule(cfg.num_stages, cfg.l_max, budget)?;
    let mut schedules: Vec<SparsitySchedule> = vec![uniform.clone()];

    match cfg.init {
        InitMode::Uniform => {
            while schedules.len() < cfg.population_size {
                schedules.push(uniform.clone());
            }
        }
        InitMode::Random => {
            while schedules.len() < cfg.population_size {
                schedules.push(randomized_from(&uniform, cfg, rng));
            }
        }
        InitMode::Patterned => {
            let n = cfg.num_stages;
            let shapes: [Vec<f64>; 4] = [
                (0..n).map(|i| (i + 1) as f64).collect(), // ramp up
                (0..n).map(|i| (n - i) as f64).collect(), // ramp down
                (0..n).map(|i| 1.0 + (i.min(n - 1 - i)) as f64).collect(), // middle-heavy
                (0..n)
                    .map(|i| 1.0 + (i.max(n - 1 - i) - i.min(n - 1 - i)) as f64)
                    .collect(), // edge-heavy
            ];
            for shape in shapes {
                if schedules.len() >= cfg.population_size {
                    break;
                }
                schedules.push(scale_shape_to_budget(&shape, cfg.l_max, budget)?);
            }
            while schedules.len() < cfg.population_size {
                schedules.push(randomized_from(&uniform, cfg, rng));
            }
        }
    }
    Ok(schedules
        .into_iter()
        .map(|s| Individual::fresh(s, 0))
        .collect())
}

/// Budget-respecting randomization: many level switches away from uniform.
fn randomized_from(
    uniform: &SparsitySchedule,
    cfg: &SearchConfig,
    rng: &mut ChaCha8Rng,
) -> SparsitySchedule {
    let mut current = uniform.clone();
    let switches = 4 * cfg.num_stages;
    for _ in 0..switches {
        let candidate = mutate_once(&current, rng, cfg.mutation_magnitude);
        if let Some(next) = candidate {
            current = next;
        }
    }
    current
}

/// Largest-remainder rounding of a non-negative shape onto the exact budget,
/// respecting the per-stage bound.
fn scale_shape_to_budget(shape: &[f64], l_max: u32, budget: u32) -> Result<SparsitySchedule> {
    let n = shape.len();
    let total: f64 = shape.iter().sum();
    if total <= 0.0 {
        return uniform_schedule(n, l_max, budget);
    }
    let raw: Vec<f64> = shape.iter().map(|w| w / total * budget as f64).collect();
    let mut levels: Vec<u32> = raw.iter().map(|&x| (x.floor() as u32).min(l_max)).collect();
    let mut assigned: u32 = levels.iter().sum();
    // Distribute the remainder by descending fractional part, then keep
    // topping up any stage with headroom until the budget is exact.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut idx = 0;
    while assigned < budget {
        let stage = order[idx % n];
        if levels[stage] < l_max {
            levels[stage] += 1;
            assigned += 1;
        }
        idx += 1;
        if idx > 4 * n * (l_max as usize + 1) {
            return Err(Error::InvalidConfig("cannot fit shape into budget".into()));
        }
    }
    SparsitySchedule::new(levels, l_max, budget)
}

// ─── mutation ──────────────────────────────────────────────────────────────

/// Applies one level switch directly: `levels[i] += delta, levels[j] -= delta`.
/// Returns `None` when the result would violate the per-stage bounds.
pub fn apply_switch(
    schedule: &SparsitySchedule,
    i: usize,
    j: usize,
    delta: u32,
) -> Option<SparsitySchedule> {
    if i == j || i >= schedule.levels.len() || j >= schedule.levels.len() {
        return None;
    }
    let gain = schedule.levels[i].checked_add(delta)?;
    if gain > schedule.l_max {
        return None;
    }
    let loss = schedule.levels[j].checked_sub(delta)?;
    let mut levels = schedule.levels.clone();
    levels[i] = gain;
    levels[j] = loss;
    Some(SparsitySchedule {
        levels,
        l_max: schedule.l_max,
        budget: schedule.budget,
    })
}

fn mutate_once(
    schedule: &SparsitySchedule,
    rng: &mut ChaCha8Rng,
    max_magnitude: u32,
) -> Option<SparsitySchedule> {
    let n = schedule.levels.len();
    if n < 2 {
        return None;
    }
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let delta = rng.random_range(1..=max_magnitude);
    apply_switch(schedule, i, j, delta)
}

/// Exactly one level switch, rejection-resampled up to 100 times. If no
/// feasible switch is found the parent schedule is returned flagged `stuck`.
pub fn mutate(
    parent: &Individual,
    rng: &mut ChaCha8Rng,
    max_magnitude: u32,
    generation: usize,
    parent_index: usize,
) -> Individual {
    for _ in 0..100 {
        if let Some(schedule) = mutate_once(&parent.schedule, rng, max_magnitude) {
            return Individual {
                schedule,
                fitness: None,
                generation,
                parent: Some(parent_index),
                stuck: false,
            };
        }
    }
    Individual {
        schedule: parent.schedule.clone(),
        fitness: parent.fitness,
        generation,
        parent: Some(parent_index),
        stuck: true,
    }
}

// ─── evaluation ────────────────────────────────────────────────────────────

/// Anything that can score a schedule's levels.
pub trait FitnessFn {
    fn eval(&mut self, levels: &[u32]) -> Result<f64>;
}

impl<F: FnMut(&[u32]) -> Result<f64>> FitnessFn for F {
    fn eval(&mut self, levels: &[u32]) -> Result<f64> {
        self(levels)
    }
}

/// Routes a schedule through the database and scores the sampled images
/// against the dense reference cache.
pub struct ScheduleEvaluator<'a> {
    pub db: &'a RouteDatabase,
    pub backbone: &'a DenoiserModel,
    pub partition: &'a StagePartition,
    pub sched: &'a NoiseSchedule,
    pub sampler: &'a SamplerConfig,
    pub metric: MetricId,
    pub refs: &'a ReferenceCache,
}

impl FitnessFn for ScheduleEvaluator<'_> {
    fn eval(&mut self, levels: &[u32]) -> Result<f64> {
        let routed = route(self.db, self.backbone, self.partition, levels)?;
        fitness_eval(
            self.metric,
            &routed,
            self.sampler,
            self.sched,
            Some(self.refs),
        )
    }
}

/// Memoizing wrapper: identical schedules are scored once. `evaluations`
/// counts cache misses, the currency of the matched-budget comparison.
pub struct CachedEvaluator<F: FitnessFn> {
    inner: F,
    cache: HashMap<Vec<u32>, f64>,
    pub evaluations: usize,
}

impl<F: FitnessFn> CachedEvaluator<F> {
    pub fn new(inner: F) -> CachedEvaluator<F> {
        CachedEvaluator {
            inner,
            cache: HashMap::new(),
            evaluations: 0,
        }
    }

    pub fn is_cached(&self, levels: &[u32]) -> bool {
        self.cache.contains_key(levels)
    }

    pub fn eval(&mut self, levels: &[u32]) -> Result<f64> {
        if let Some(&v) = self.cache.get(levels) {
            return Ok(v);
        }
        let v = self.inner.eval(levels)?;
        self.evaluations += 1;
        self.cache.insert(levels.to_vec(), v);
        Ok(v)
    }
}

fn evaluate_individual<F: FitnessFn>(
    ind: &mut Individual,
    evaluator: &mut CachedEvaluator<F>,
) -> Result<()> {
    if ind.fitness.is_none() {
        ind.fitness = Some(evaluator.eval(&ind.schedule.levels)?);
    }
    Ok(())
}

// ─── selection and the generational loop ───────────────────────────────────

/// Orders by fitness descending; ties prefer the lexicographically smaller
/// schedule so selection is reproducible.
fn selection_order(pop: &[Individual]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..pop.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = pop[a].fitness.expect("fitness evaluated");
        let fb = pop[b].fitness.expect("fitness evaluated");
        fb.partial_cmp(&fa)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(pop[a].schedule.levels.cmp(&pop[b].schedule.levels))
            .then(a.cmp(&b))
    });
    order
}

/// One generation: keep the top `survivors` unchanged, refill with mutants
/// of uniformly chosen survivors, and evaluate the newcomers.
pub fn step_generation<F: FitnessFn>(
    pop: Vec<Individual>,
    cfg: &SearchConfig,
    generation: usize,
    rng: &mut ChaCha8Rng,
    evaluator: &mut CachedEvaluator<F>,
) -> Result<Vec<Individual>> {
    let order = selection_order(&pop);
    let mut next: Vec<Individual> = order[..cfg.survivors.min(pop.len())]
        .iter()
        .map(|&i| pop[i].clone())
        .collect();
    for _ in 0..cfg.offspring {
        let parent_index = rng.random_range(0..next.len().min(cfg.survivors));
        let parent = next[parent_index].clone();
        let mut child = mutate(
            &parent,
            rng,
            cfg.mutation_magnitude,
            generation,
            parent_index,
        );
        evaluate_individual(&mut child, evaluator)?;
        next.push(child);
    }
    Ok(next)
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerationStat {
    pub generation: usize,
    pub best: f64,
    pub mean: f64,
}

#[derive(Debug)]
pub struct SearchOutcome {
    pub best: Individual,
    pub history: Vec<GenerationStat>,
    pub evaluations: usize,
}

fn stats_of(pop: &[Individual], generation: usize) -> GenerationStat {
    let fits: Vec<f64> = pop
        .iter()
        .map(|i| i.fitness.expect("fitness evaluated"))
        .collect();
    let best = fits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = fits.iter().sum::<f64>() / fits.len() as f64;
    GenerationStat {
        generation,
        best,
        mean,
    }
}

fn best_of(pop: &[Individual]) -> Individual {
    let order = selection_order(pop);
    pop[order[0]].clone()
}

/// Full mutation–evaluation–selection loop for `cfg.generations` rounds.
pub fn search<F: FitnessFn>(
    cfg: &SearchConfig,
    evaluator: &mut CachedEvaluator<F>,
) -> Result<SearchOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop = init_population(cfg, &mut rng)?;
    for ind in &mut pop {
        evaluate_individual(ind, evaluator)?;
    }
    let mut history = vec![stats_of(&pop, 0)];
    let mut best = best_of(&pop);
    for generation in 1..=cfg.generations {
        pop = step_generation(pop, cfg, generation, &mut rng, evaluator)?;
        let stat = stats_of(&pop, generation);
        let gen_best = best_of(&pop);
        if gen_best.fitness > best.fitness
            || (gen_best.fitness == best.fitness && gen_best.schedule.levels < best.schedule.levels)
        {
            best = gen_best;
        }
        history.push(stat);
    }
    Ok(SearchOutcome {
        best,
        history,
        evaluations: evaluator.evaluations,
    })
}

#[derive(Debug)]
pub struct GreedyOutcome {
    pub best: Individual,
    pub evaluations: usize,
    pub moves: usize,
}

/// Best-improvement hill climbing from the uniform schedule: evaluate every
/// single level switch with Δ = 1, take the best strictly improving move,
/// stop when none improves or when the evaluation budget (matched to the
/// evolutionary run) is spent.
pub fn greedy_search<F: FitnessFn>(
    cfg: &SearchConfig,
    evaluator: &mut CachedEvaluator<F>,
) -> Result<GreedyOutcome> {
    cfg.validate()?;
    let cap = cfg.evaluation_budget();
    let mut current = uniform_schedule(cfg.num_stages, cfg.l_max, cfg.budget())?;
    let mut current_fit = evaluator.eval(&current.levels)?;
    let mut moves = 0usize;
    loop {
        let mut best_move: Option<(f64, SparsitySchedule)> = None;
        'moves: for i in 0..cfg.num_stages {
            for j in 0..cfg.num_stages {
                if i == j {
                    continue;
                }
                let Some(candidate) = apply_switch(&current, i, j, 1) else {
                    continue;
                };
                if !evaluator.is_cached(&candidate.levels) && evaluator.evaluations >= cap {
                    break 'moves; // budget exhausted
                }
                let fit = evaluator.eval(&candidate.levels)?;
                let better = match &best_move {
                    None => fit > current_fit,
                    Some((bf, bs)) => fit > *bf || (fit == *bf && candidate.levels < bs.levels),
                };
                if better {
                    best_move = Some((fit, candidate));
                }
            }
        }
        match best_move {
            Some((fit, schedule)) if fit > current_fit => {
                current = schedule;
                current_fit = fit;
                moves += 1;
            }
            _ => break,
        }
        if evaluator.evaluations >= cap {
            break;
        }
    }
    Ok(GreedyOutcome {
        best: Individual {
            schedule: current,
            fitness: Some(current_fit),
            generation: moves,
            parent: None,
            stuck: false,
        },
        evaluations: evaluator.evaluations,
        moves,
    })
}

/// Global sparsity of a raw level vector (see
/// [`SparsitySchedule::global_sparsity`]).
pub fn global_sparsity(levels: &[u32], l_max: u32) -> f64 {
    if levels.is_empty() || l_max == 0 {
        return 0.0;
    }
    levels.iter().sum::<u32>() as f64 / (levels.len() as f64 * l_max as f64)
}
