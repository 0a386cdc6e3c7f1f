//! FLOPs-conditioned prior over width choices, estimated from training-time
//! loss records, and rejection sampling under a FLOPs budget.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::LossRecord;
use crate::search_space::{SearchSpace, WidthConfig};

/// Proxy loss of one record: `largest_loss_at_t / final_largest_loss * raw_loss`.
pub fn proxy_loss(raw_loss: f64, largest_loss_at_t: f64, final_largest_loss: f64) -> Result<f64> {
    if !(final_largest_loss > 0.0) || !final_largest_loss.is_finite() {
        return Err(Error::Normalization(format!(
            "final largest-subnet loss must be positive, got {final_largest_loss}"
        )));
    }
    Ok(largest_loss_at_t / final_largest_loss * raw_loss)
}

/// How a record's proxy loss turns into sampling weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    /// Weight `1 / p`: lower loss counts more.
    #[default]
    InverseProxy,
    /// Weight `p`.
    LiteralProxy,
    /// Every record counts once.
    Frequency,
}

impl Weighting {
    pub fn transform(self, p: f64) -> f64 {
        match self {
            Weighting::InverseProxy => 1.0 / p.max(f64::MIN_POSITIVE),
            Weighting::LiteralProxy => p,
            Weighting::Frequency => 1.0,
        }
    }

    fn needs_proxy(self) -> bool {
        self != Weighting::Frequency
    }

    /// Orders proxy values best first. Frequency weighting ranks like the
    /// inverse transform.
    fn rank_key(self, p: f64) -> f64 {
        match self {
            Weighting::LiteralProxy => -p,
            _ => p,
        }
    }
}

impl std::str::FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverse-proxy" => Ok(Weighting::InverseProxy),
            "literal-proxy" => Ok(Weighting::LiteralProxy),
            "frequency" => Ok(Weighting::Frequency),
            other => Err(Error::Config(format!(
                "unknown weighting '{other}' (expected inverse-proxy, literal-proxy or frequency)"
            ))),
        }
    }
}

/// Proxy losses of a record list, aligned with it by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyLossTable {
    pub proxies: Vec<f64>,
    pub largest_loss_by_iter: BTreeMap<u64, f64>,
    pub final_largest_loss: f64,
}

impl ProxyLossTable {
    pub fn from_records(records: &[LossRecord]) -> Result<Self> {
        check_records(records)?;
        let mut sums: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        for r in records.iter().filter(|r| r.is_largest) {
            let e = sums.entry(r.iteration).or_insert((0.0, 0));
            e.0 += r.raw_loss;
            e.1 += 1;
        }
        let largest_loss_by_iter: BTreeMap<u64, f64> =
            sums.into_iter().map(|(t, (s, c))| (t, s / c as f64)).collect();
        let last = records.iter().map(|r| r.iteration).max().unwrap_or(0);
        let final_largest_loss = *largest_loss_by_iter.get(&last).ok_or_else(|| {
            Error::Normalization(format!("no largest-subnet record at final iteration {last}"))
        })?;
        let proxies = records
            .iter()
            .map(|r| {
                let at_t = largest_loss_by_iter.get(&r.iteration).ok_or_else(|| {
                    Error::Normalization(format!(
                        "no largest-subnet record at iteration {}",
                        r.iteration
                    ))
                })?;
                proxy_loss(r.raw_loss, *at_t, final_largest_loss)
            })
            .collect::<Result<_>>()?;
        Ok(ProxyLossTable {
            proxies,
            largest_loss_by_iter,
            final_largest_loss,
        })
    }
}

fn check_records(records: &[LossRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Build("no loss records".into()));
    }
    for r in records {
        if !r.raw_loss.is_finite() || r.raw_loss < 0.0 {
            return Err(Error::Build(format!(
                "record at iteration {} has invalid loss {}",
                r.iteration, r.raw_loss
            )));
        }
        if r.flops == 0 {
            return Err(Error::Build(format!(
                "record at iteration {} has zero FLOPs",
                r.iteration
            )));
        }
    }
    Ok(())
}

/// Per-bucket, per-layer categorical over each layer's allowed widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorDistribution {
    pub weighting: Weighting,
    pub bucket_width: u64,
    /// Ascending edges; bucket `i` covers `[edges[i], edges[i + 1])`, the
    /// last bucket also absorbs anything above.
    pub bucket_edges: Vec<u64>,
    /// `weights[bucket][layer]` maps width to probability.
    pub weights: Vec<Vec<BTreeMap<usize, f64>>>,
    /// True where a bucket had no records and holds the uniform fallback.
    pub fallback_flags: Vec<bool>,
    pub fallback: Vec<BTreeMap<usize, f64>>,
    pub space_hash: String,
}

/// Default bucket width: 5% of the largest configuration's FLOPs.
pub fn default_bucket_width(space: &SearchSpace) -> u64 {
    (space.flops_unchecked(&space.largest_config()) / 20).max(1)
}

pub fn build_distribution(
    records: &[LossRecord],
    space: &SearchSpace,
    bucket_width: u64,
    weighting: Weighting,
) -> Result<PriorDistribution> {
    check_records(records)?;
    if bucket_width == 0 {
        return Err(Error::Build("bucket width must be positive".into()));
    }
    for r in records {
        space
            .validate(&r.widths)
            .map_err(|e| Error::Build(format!("record at iteration {}: {e}", r.iteration)))?;
    }
    let proxies = if weighting.needs_proxy() {
        ProxyLossTable::from_records(records)?.proxies
    } else {
        vec![1.0; records.len()]
    };

    let max_flops = space
        .flops_unchecked(&space.largest_config())
        .max(records.iter().map(|r| r.flops).max().unwrap_or(0));
    let n_buckets = (max_flops / bucket_width + 1) as usize;
    let bucket_edges: Vec<u64> = (0..=n_buckets as u64).map(|i| i * bucket_width).collect();

    let n_layers = space.num_layers();
    let choices: Vec<&[usize]> = (0..n_layers).map(|l| space.choices_of(l)).collect();
    let fallback: Vec<BTreeMap<usize, f64>> = choices
        .iter()
        .map(|c| c.iter().map(|&w| (w, 1.0 / c.len() as f64)).collect())
        .collect();

    let mut mass: Vec<Option<Vec<BTreeMap<usize, f64>>>> = vec![None; n_buckets];
    for (r, &p) in records.iter().zip(&proxies) {
        let b = bucket_index(&bucket_edges, r.flops);
        let g = weighting.transform(p);
        let cell = mass[b].get_or_insert_with(|| {
            choices
                .iter()
                .map(|c| c.iter().map(|&w| (w, 0.0)).collect())
                .collect()
        });
        for (l, &w) in r.widths.widths.iter().enumerate() {
            *cell[l].get_mut(&w).expect("validated width") += g;
        }
    }

    let mut weights = Vec::with_capacity(n_buckets);
    let mut fallback_flags = Vec::with_capacity(n_buckets);
    for cell in mass {
        match cell {
            None => {
                weights.push(fallback.clone());
                fallback_flags.push(true);
            }
            Some(layers) => {
                let mut any_fallback = false;
                let normalized = layers
                    .into_iter()
                    .enumerate()
                    .map(|(l, mut m)| {
                        let total: f64 = m.values().sum();
                        if !(total > 0.0) || !total.is_finite() {
                            any_fallback = true;
                            return fallback[l].clone();
                        }
                        m.values_mut().for_each(|v| *v /= total);
                        m
                    })
                    .collect();
                weights.push(normalized);
                fallback_flags.push(any_fallback);
            }
        }
    }

    Ok(PriorDistribution {
        weighting,
        bucket_width,
        bucket_edges,
        weights,
        fallback_flags,
        fallback,
        space_hash: space.hash_hex(),
    })
}

fn bucket_index(edges: &[u64], flops: u64) -> usize {
    let n = edges.len() - 1;
    (edges.partition_point(|&e| e <= flops).saturating_sub(1)).min(n - 1)
}

impl PriorDistribution {
    pub fn num_buckets(&self) -> usize {
        self.weights.len()
    }

    pub fn bucket_of(&self, flops: u64) -> usize {
        bucket_index(&self.bucket_edges, flops)
    }

    /// Default tolerance: half a bucket.
    pub fn default_tolerance(&self) -> u64 {
        self.bucket_width / 2
    }

    fn check_space(&self, space: &SearchSpace) -> Result<()> {
        if self.fallback.len() != space.num_layers() {
            return Err(Error::Config(format!(
                "distribution covers {} layers, space has {}",
                self.fallback.len(),
                space.num_layers()
            )));
        }
        for (l, f) in self.fallback.iter().enumerate() {
            if !f.keys().copied().eq(space.choices_of(l).iter().copied()) {
                return Err(Error::Config(format!(
                    "distribution choices for layer {l} do not match the space"
                )));
            }
        }
        Ok(())
    }

    /// Categorical of each degree of freedom in `bucket`: product of its
    /// member layers' categoricals, renormalized.
    pub fn dof_categoricals(&self, space: &SearchSpace, bucket: usize) -> Vec<Categorical> {
        space
            .degrees_of_freedom()
            .iter()
            .map(|members| {
                let choices = space.choices_of(members[0]).to_vec();
                let mut w: Vec<f64> = choices
                    .iter()
                    .map(|c| members.iter().map(|&l| self.weights[bucket][l][c]).product())
                    .collect();
                let total: f64 = w.iter().sum();
                if total > 0.0 && total.is_finite() {
                    w.iter_mut().for_each(|v| *v /= total);
                } else {
                    w = vec![1.0 / choices.len() as f64; choices.len()];
                }
                Categorical::new(choices, w)
            })
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("distribution serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
    }
}

/// Finite categorical over widths with a cumulative table for sampling.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    pub choices: Vec<usize>,
    pub probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl Categorical {
    pub fn new(choices: Vec<usize>, probs: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Categorical {
            choices,
            probs,
            cumulative,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let total = *self.cumulative.last().expect("non-empty categorical");
        let u = rng.random::<f64>() * total;
        let i = self.cumulative.partition_point(|&c| c <= u);
        let i = i.min(self.choices.len() - 1);
        self.choices[i]
    }
}

fn draw_config<R: Rng + ?Sized>(
    space: &SearchSpace,
    cats: &[Categorical],
    rng: &mut R,
) -> WidthConfig {
    let mut widths = vec![0; space.num_layers()];
    for (members, cat) in space.degrees_of_freedom().iter().zip(cats) {
        let w = cat.sample(rng);
        for &l in members {
            widths[l] = w;
        }
    }
    WidthConfig::new(widths)
}

fn rejection_loop<R: Rng + ?Sized>(
    space: &SearchSpace,
    target_flops: u64,
    tolerance: f64,
    max_trials: u64,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> WidthConfig,
) -> Result<(WidthConfig, u64)> {
    if max_trials == 0 {
        return Err(Error::Config("max_trials must be at least 1".into()));
    }
    let mut closest = u64::MAX;
    for trial in 1..=max_trials {
        let cfg = draw(rng);
        let f = space.flops_unchecked(&cfg);
        if (f.abs_diff(target_flops) as f64) <= tolerance {
            return Ok((cfg, trial));
        }
        if f.abs_diff(target_flops) < closest.abs_diff(target_flops) {
            closest = f;
        }
    }
    Err(Error::SamplingExhausted {
        target: target_flops,
        tolerance,
        trials: max_trials,
        closest_flops: closest,
    })
}

/// Draws from the categorical of the bucket holding `target_flops` until a
/// configuration lands within `tolerance`. Returns it with the number of
/// draws used.
pub fn sample_conditioned<R: Rng + ?Sized>(
    dist: &PriorDistribution,
    space: &SearchSpace,
    target_flops: u64,
    tolerance: f64,
    rng: &mut R,
    max_trials: u64,
) -> Result<(WidthConfig, u64)> {
    dist.check_space(space)?;
    let cats = dist.dof_categoricals(space, dist.bucket_of(target_flops));
    rejection_loop(space, target_flops, tolerance, max_trials, rng, |r| {
        draw_config(space, &cats, r)
    })
}

/// Rejection sampling with uniform draws over the space.
pub fn sample_uniform_constrained<R: Rng + ?Sized>(
    space: &SearchSpace,
    target_flops: u64,
    tolerance: f64,
    rng: &mut R,
    max_trials: u64,
) -> Result<(WidthConfig, u64)> {
    rejection_loop(space, target_flops, tolerance, max_trials, rng, |r| {
        space.sample_uniform(r)
    })
}

/// Up to `count` distinct in-tolerance configurations, best proxy first.
pub fn top_records(
    records: &[LossRecord],
    table: &ProxyLossTable,
    weighting: Weighting,
    count: usize,
    target_flops: u64,
    tolerance: f64,
) -> Vec<WidthConfig> {
    let mut best: HashMap<&WidthConfig, f64> = HashMap::new();
    for (r, &p) in records.iter().zip(&table.proxies) {
        if (r.flops.abs_diff(target_flops) as f64) > tolerance {
            continue;
        }
        let key = weighting.rank_key(p);
        best.entry(&r.widths)
            .and_modify(|k| *k = k.min(key))
            .or_insert(key);
    }
    let mut ranked: Vec<(&WidthConfig, f64)> = best.into_iter().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    ranked
        .into_iter()
        .take(count)
        .map(|(c, _)| c.clone())
        .collect()
}
