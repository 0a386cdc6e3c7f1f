//! FLOPs-constrained evolutionary search over width configurations.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::ops;
use crate::prior::{
    sample_conditioned, top_records, Categorical, PriorDistribution, ProxyLossTable, Weighting,
};
use crate::records::{JsonlWriter, LossRecord};
use crate::search_space::{SearchSpace, WidthConfig};
use crate::supernet::SupernetHandle;
use crate::tensor::{Scalar, Tensor};

const OFFSPRING_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub config: WidthConfig,
    pub flops: u64,
    pub params: u64,
    pub proxy_accuracy: Option<f64>,
}

impl Candidate {
    pub fn new(space: &SearchSpace, config: WidthConfig) -> Result<Self> {
        Ok(Candidate {
            flops: space.flops(&config)?,
            params: space.params(&config)?,
            config,
            proxy_accuracy: None,
        })
    }
}

/// Ranking order: higher accuracy, then fewer FLOPs, then fewer params,
/// then widths lexicographically.
pub fn rank_order(a: &Candidate, b: &Candidate) -> Ordering {
    let acc = |c: &Candidate| c.proxy_accuracy.unwrap_or(f64::NEG_INFINITY);
    acc(b)
        .total_cmp(&acc(a))
        .then(a.flops.cmp(&b.flops))
        .then(a.params.cmp(&b.params))
        .then_with(|| a.config.cmp(&b.config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvoConfig {
    #[serde(default = "d_population")]
    pub population_size: usize,
    #[serde(default = "d_parents")]
    pub parent_count: usize,
    #[serde(default = "d_mutation")]
    pub mutation_prob: f64,
    #[serde(default = "d_generations")]
    pub generations: usize,
    pub target_flops: u64,
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    /// Share of each new generation produced by crossover; the rest by
    /// mutation.
    #[serde(default = "d_crossover")]
    pub crossover_fraction: f64,
    /// Draw budget for each prior rejection-sampling call.
    #[serde(default = "d_trials")]
    pub max_trials: u64,
}

fn d_population() -> usize {
    128
}
fn d_parents() -> usize {
    64
}
fn d_mutation() -> f64 {
    0.2
}
fn d_generations() -> usize {
    20
}
fn d_crossover() -> f64 {
    0.5
}
fn d_trials() -> u64 {
    100_000
}

impl EvoConfig {
    pub fn new(target_flops: u64, tolerance: f64) -> Self {
        EvoConfig {
            population_size: d_population(),
            parent_count: d_parents(),
            mutation_prob: d_mutation(),
            generations: d_generations(),
            target_flops,
            tolerance,
            seed: 0,
            crossover_fraction: d_crossover(),
            max_trials: d_trials(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 || self.population_size % 2 != 0 {
            return Err(Error::Config("population size must be even and positive".into()));
        }
        if self.parent_count == 0 || self.parent_count > self.population_size {
            return Err(Error::Config("parent count must be in 1..=population size".into()));
        }
        if !(0.0..=1.0).contains(&self.mutation_prob) || !(0.0..=1.0).contains(&self.crossover_fraction) {
            return Err(Error::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.generations == 0 {
            return Err(Error::Config("at least one generation is required".into()));
        }
        if !(self.tolerance >= 0.0) {
            return Err(Error::Config("tolerance must be non-negative".into()));
        }
        Ok(())
    }

    fn in_tolerance(&self, space: &SearchSpace, cfg: &WidthConfig) -> bool {
        (space.flops_unchecked(cfg).abs_diff(self.target_flops) as f64) <= self.tolerance
    }
}

/// Everything the search needs from the prior side.
pub struct SearchContext<'a> {
    pub space: &'a SearchSpace,
    pub dist: &'a PriorDistribution,
    pub records: &'a [LossRecord],
    /// Proxy table of `records`; without it the population is seeded from
    /// the distribution alone.
    pub table: Option<&'a ProxyLossTable>,
    pub weighting: Weighting,
}

impl SearchContext<'_> {
    fn categoricals(&self, evo: &EvoConfig) -> Vec<Categorical> {
        self.dist
            .dof_categoricals(self.space, self.dist.bucket_of(evo.target_flops))
    }

    fn sample<R: Rng + ?Sized>(&self, evo: &EvoConfig, rng: &mut R) -> Result<WidthConfig> {
        sample_conditioned(
            self.dist,
            self.space,
            evo.target_flops,
            evo.tolerance,
            rng,
            evo.max_trials,
        )
        .map(|(c, _)| c)
    }
}

/// Initial population: half from the best in-tolerance training records,
/// the rest (and any shortfall) from the prior. Distinct configurations
/// only, so a space with fewer feasible configs yields a smaller population.
pub fn init_population<R: Rng + ?Sized>(
    ctx: &SearchContext<'_>,
    evo: &EvoConfig,
    rng: &mut R,
) -> Result<Vec<WidthConfig>> {
    evo.validate()?;
    let p = evo.population_size;
    let mut seen = HashSet::new();
    let mut pop = Vec::with_capacity(p);
    if let Some(table) = ctx.table {
        for cfg in top_records(ctx.records, table, ctx.weighting, p / 2, evo.target_flops, evo.tolerance) {
            if seen.insert(cfg.clone()) {
                pop.push(cfg);
            }
        }
    }
    let mut misses = 0;
    while pop.len() < p && misses < OFFSPRING_ATTEMPTS {
        let cfg = match ctx.sample(evo, rng) {
            Ok(c) => c,
            Err(e) if pop.is_empty() => return Err(e),
            Err(_) => break,
        };
        if seen.insert(cfg.clone()) {
            pop.push(cfg);
            misses = 0;
        } else {
            misses += 1;
        }
    }
    Ok(pop)
}

/// Resamples each degree of freedom with probability `prob` from `cats`.
pub fn mutate_genes<R: Rng + ?Sized>(
    config: &WidthConfig,
    space: &SearchSpace,
    cats: &[Categorical],
    prob: f64,
    rng: &mut R,
) -> WidthConfig {
    let mut out = config.clone();
    for (members, cat) in space.degrees_of_freedom().iter().zip(cats) {
        if rng.random::<f64>() < prob {
            let w = cat.sample(rng);
            for &l in members {
                out.widths[l] = w;
            }
        }
    }
    out
}

/// Takes each degree of freedom from `a` or `b` with equal probability.
pub fn crossover_genes<R: Rng + ?Sized>(
    a: &WidthConfig,
    b: &WidthConfig,
    space: &SearchSpace,
    rng: &mut R,
) -> WidthConfig {
    let mut out = a.clone();
    for members in space.degrees_of_freedom() {
        if rng.random::<bool>() {
            for &l in members {
                out.widths[l] = b.widths[l];
            }
        }
    }
    out
}

fn constrained<R: Rng + ?Sized>(
    ctx: &SearchContext<'_>,
    evo: &EvoConfig,
    fallback: &WidthConfig,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> WidthConfig,
) -> WidthConfig {
    for _ in 0..OFFSPRING_ATTEMPTS {
        let c = draw(rng);
        if evo.in_tolerance(ctx.space, &c) {
            return c;
        }
    }
    ctx.sample(evo, rng).unwrap_or_else(|_| fallback.clone())
}

/// Mutation with the FLOPs constraint: redraws up to 100 times, then falls
/// back to a prior sample (or the parent if that is exhausted too).
pub fn mutate<R: Rng + ?Sized>(
    config: &WidthConfig,
    ctx: &SearchContext<'_>,
    evo: &EvoConfig,
    rng: &mut R,
) -> WidthConfig {
    let cats = ctx.categoricals(evo);
    constrained(ctx, evo, config, rng, |r| {
        mutate_genes(config, ctx.space, &cats, evo.mutation_prob, r)
    })
}

/// Crossover with the same constraint handling as [`mutate`].
pub fn crossover<R: Rng + ?Sized>(
    a: &WidthConfig,
    b: &WidthConfig,
    ctx: &SearchContext<'_>,
    evo: &EvoConfig,
    rng: &mut R,
) -> WidthConfig {
    constrained(ctx, evo, a, rng, |r| crossover_genes(a, b, ctx.space, r))
}

/// Scores a width configuration; higher is better.
pub trait Evaluator {
    fn evaluate(&mut self, config: &WidthConfig) -> Result<f64>;
}

/// Adapts a closure into an [`Evaluator`].
pub struct FnEvaluator<F>(pub F);

impl<F: FnMut(&WidthConfig) -> f64> Evaluator for FnEvaluator<F> {
    fn evaluate(&mut self, config: &WidthConfig) -> Result<f64> {
        Ok((self.0)(config))
    }
}

/// Top-1 accuracy of one subnet after recalibrating BN statistics for it.
pub fn proxy_accuracy<T: Scalar>(
    handle: &SupernetHandle<T>,
    config: &WidthConfig,
    validation: &Split<T>,
    calibration: &[Tensor<T>],
    batch_size: usize,
) -> Result<f64> {
    let recal = handle.recalibrate_bn(config, calibration)?;
    accuracy(&recal, config, validation, batch_size)
}

/// Top-1 accuracy of `config` on `split` with the handle's current BN state.
pub fn accuracy<T: Scalar>(
    handle: &SupernetHandle<T>,
    config: &WidthConfig,
    split: &Split<T>,
    batch_size: usize,
) -> Result<f64> {
    if split.is_empty() {
        return Err(Error::Dataset("empty validation split".into()));
    }
    let mut correct = 0usize;
    for b in split.batches(batch_size) {
        let logits = handle.subnet_logits(config, &b.images)?;
        correct += ops::argmax_rows(&logits)
            .iter()
            .zip(&b.labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / split.len() as f64)
}

/// Proxy-accuracy evaluator over a trained supernet.
pub struct SupernetEvaluator<'a, T> {
    pub handle: &'a SupernetHandle<T>,
    pub validation: &'a Split<T>,
    pub calibration: Vec<Tensor<T>>,
    pub batch_size: usize,
}

impl<'a, T: Scalar> SupernetEvaluator<'a, T> {
    /// Calibration batches are cut from `calibration` in stored order, at
    /// most `max_batches` of them.
    pub fn new(
        handle: &'a SupernetHandle<T>,
        validation: &'a Split<T>,
        calibration: &Split<T>,
        batch_size: usize,
        max_batches: usize,
    ) -> Self {
        let calibration = calibration
            .batches(batch_size)
            .into_iter()
            .take(max_batches)
            .map(|b| b.images)
            .collect();
        SupernetEvaluator {
            handle,
            validation,
            calibration,
            batch_size,
        }
    }
}

impl<T: Scalar> Evaluator for SupernetEvaluator<'_, T> {
    fn evaluate(&mut self, config: &WidthConfig) -> Result<f64> {
        proxy_accuracy(
            self.handle,
            config,
            self.validation,
            &self.calibration,
            self.batch_size,
        )
    }
}

/// One line of the search log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchLogRecord {
    pub generation: usize,
    pub widths: WidthConfig,
    pub flops: u64,
    pub params: u64,
    pub proxy_accuracy: f64,
}

/// Generational search. Every evaluated candidate is kept; parents are the
/// top `parent_count` of the whole history, and the returned list is that
/// history ranked best first.
pub fn search<E: Evaluator>(
    ctx: &SearchContext<'_>,
    evo: &EvoConfig,
    evaluator: &mut E,
    mut log: Option<&mut JsonlWriter>,
) -> Result<Vec<Candidate>> {
    evo.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(evo.seed);
    let mut seen: HashSet<WidthConfig> = HashSet::new();
    let mut history: Vec<Candidate> = Vec::new();
    let mut population = init_population(ctx, evo, &mut rng)?;

    for generation in 0..evo.generations {
        for cfg in population.drain(..) {
            if !seen.insert(cfg.clone()) {
                continue;
            }
            let mut cand = Candidate::new(ctx.space, cfg)?;
            let acc = evaluator.evaluate(&cand.config)?;
            cand.proxy_accuracy = Some(acc);
            if let Some(w) = log.as_deref_mut() {
                w.write(&SearchLogRecord {
                    generation,
                    widths: cand.config.clone(),
                    flops: cand.flops,
                    params: cand.params,
                    proxy_accuracy: acc,
                })?;
            }
            history.push(cand);
        }
        history.sort_by(rank_order);
        if generation + 1 == evo.generations {
            break;
        }
        let parents: Vec<&WidthConfig> = history
            .iter()
            .take(evo.parent_count)
            .map(|c| &c.config)
            .collect();
        population = next_generation(ctx, evo, &parents, &seen, &mut rng);
    }
    if let Some(w) = log {
        w.flush()?;
    }
    Ok(history)
}

fn next_generation<R: Rng + ?Sized>(
    ctx: &SearchContext<'_>,
    evo: &EvoConfig,
    parents: &[&WidthConfig],
    seen: &HashSet<WidthConfig>,
    rng: &mut R,
) -> Vec<WidthConfig> {
    let p = evo.population_size;
    let n_cross = (p as f64 * evo.crossover_fraction).round() as usize;
    let mut fresh: HashSet<WidthConfig> = HashSet::new();
    let mut out = Vec::with_capacity(p);
    let novel = |c: &WidthConfig, fresh: &HashSet<WidthConfig>| !seen.contains(c) && !fresh.contains(c);
    for slot in 0..p {
        let mut accepted = None;
        for _ in 0..OFFSPRING_ATTEMPTS {
            let child = if slot < n_cross {
                let a = parents.choose(rng).expect("parents");
                let b = parents.choose(rng).expect("parents");
                crossover(a, b, ctx, evo, rng)
            } else {
                mutate(parents.choose(rng).expect("parents"), ctx, evo, rng)
            };
            if novel(&child, &fresh) {
                accepted = Some(child);
                break;
            }
        }
        if accepted.is_none() {
            for _ in 0..OFFSPRING_ATTEMPTS {
                match ctx.sample(evo, rng) {
                    Ok(c) if novel(&c, &fresh) => {
                        accepted = Some(c);
                        break;
                    }
                    Ok(_) => {}
                    Err(_) => break,
                }
            }
        }
        if let Some(c) = accepted {
            fresh.insert(c.clone());
            out.push(c);
        }
    }
    out
}

/// Writes a ranked candidate table with columns
/// `rank,widths,flops,params,proxy_acc`.
pub fn write_ranked_csv(path: &Path, ranked: &[Candidate]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["rank", "widths", "flops", "params", "proxy_acc"])
        .map_err(|e| csv_err(path, e))?;
    for (i, c) in ranked.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            c.config.to_string(),
            c.flops.to_string(),
            c.params.to_string(),
            c.proxy_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::parse(path, e)
}
