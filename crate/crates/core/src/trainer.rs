//! Supernet pre-training, from-scratch subnet retraining, and the run
//! configuration file.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::ArchDescription;
use crate::checkpoint::{self, Checkpoint, CheckpointManifest};
use crate::data::{Dataset, DatasetSpec, Split};
use crate::error::{Error, Result};
use crate::evo::{self, EvoConfig};
use crate::optim::{OptimizerSpec, Sgd};
use crate::prior::Weighting;
use crate::records::{JsonlWriter, LossRecord};
use crate::search_space::{SearchSpace, WidthConfig};
use crate::supernet::{BnMode, PartitionPolicy, SupernetHandle};
use crate::tensor::Tensor;

pub const RECORDS_FILE: &str = "loss_records.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "supernet.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRecipe {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "d_parts")]
    pub n_parts: usize,
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub policy: PartitionPolicy,
}

fn d_parts() -> usize {
    4
}

impl TrainRecipe {
    /// 30 epochs, batch 128 in 4 parts, SGD 0.1 with cosine decay, on the
    /// built-in synthetic set.
    pub fn desk() -> Self {
        TrainRecipe {
            epochs: 30,
            batch_size: 128,
            n_parts: 4,
            optimizer: OptimizerSpec::sgd(0.1),
            seed: 0,
            dataset: DatasetSpec::default(),
            policy: PartitionPolicy::LargestPlusRandom,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.n_parts == 0 || self.batch_size == 0 || self.batch_size % self.n_parts != 0 {
            return Err(Error::Config(format!(
                "batch size {} must be a positive multiple of n_parts {}",
                self.batch_size, self.n_parts
            )));
        }
        if !(self.optimizer.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        Ok(())
    }

    pub fn iterations_per_epoch(&self, train_len: usize) -> u64 {
        train_len.div_ceil(self.batch_size) as u64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub iteration: u64,
    /// Mean training loss of the largest-subnet part (or of part 0 when the
    /// policy has no largest anchor).
    pub anchor_loss: f64,
    pub mean_loss: f64,
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for loss records and checkpoints; nothing is written when
    /// absent.
    pub out_dir: Option<PathBuf>,
    /// Continue from a saved state instead of a fresh initialization.
    pub resume: Option<Checkpoint<f32>>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochSummary)>,
}

pub struct SupernetRun {
    pub handle: SupernetHandle<f32>,
    pub velocity: Vec<Vec<f32>>,
    /// Records of the steps run in this call.
    pub records: Vec<LossRecord>,
    pub epochs: Vec<EpochSummary>,
    pub total_iterations: u64,
    pub rng: ChaCha8Rng,
}

fn check_dataset(space: &SearchSpace, data: &Dataset<f32>) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let [_, c, h, w] = data.train.images.shape();
    let (rh, rw) = space.reference_resolution;
    if (c, h, w) != (space.graph.input_channels, rh, rw) {
        return Err(Error::Dataset(format!(
            "images are {c}x{h}x{w}, the space expects {}x{rh}x{rw}",
            space.graph.input_channels
        )));
    }
    let classes = space.layers.last().map_or(0, |l| l.max_out_channels);
    if data.num_classes > classes {
        return Err(Error::Dataset(format!(
            "{} classes but the network has {classes} outputs",
            data.num_classes
        )));
    }
    Ok(())
}

/// Constraint-free supernet pre-training with parallel subnets.
pub fn train_supernet(
    space: &SearchSpace,
    recipe: &TrainRecipe,
    data: &Dataset<f32>,
    mut opts: TrainOptions<'_>,
) -> Result<SupernetRun> {
    recipe.validate()?;
    check_dataset(space, data)?;
    let per_epoch = recipe.iterations_per_epoch(data.train.len());
    let total = per_epoch * recipe.epochs as u64;

    let mut optimizer = Sgd::new(&recipe.optimizer);
    let (mut handle, mut rng, start_epoch) = match opts.resume.take() {
        Some(ck) => {
            if ck.manifest.space_hash != space.hash_hex() {
                return Err(Error::Checkpoint("resume checkpoint belongs to another space".into()));
            }
            optimizer.set_velocity(ck.velocity);
            let handle = SupernetHandle {
                space: space.clone(),
                params: ck.params,
                bn_mode: BnMode::BatchStatisticsNoAccumulate,
                calibrated_for: None,
            };
            (handle, ck.manifest.rng, ck.manifest.epoch)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(recipe.seed);
            let handle = SupernetHandle::new(space.clone(), &mut rng);
            (handle, rng, 0)
        }
    };

    let mut writer = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(RECORDS_FILE);
            Some(if start_epoch == 0 {
                JsonlWriter::create(&path)?
            } else {
                JsonlWriter::append(&path)?
            })
        }
        None => None,
    };

    let mut records = Vec::new();
    let mut epochs = Vec::new();
    let mut iteration = start_epoch as u64 * per_epoch;
    for epoch in start_epoch..recipe.epochs {
        let order = data.train.epoch_order(recipe.batch_size, &mut rng);
        let (mut anchor_sum, mut anchor_n, mut loss_sum, mut loss_n) = (0.0, 0usize, 0.0, 0usize);
        for idx in order {
            let batch = data.train.gather(&idx);
            let lr = recipe.optimizer.lr_at(iteration, total, per_epoch);
            let out = handle.train_step(
                &mut optimizer,
                lr,
                &batch.images,
                &batch.labels,
                recipe.n_parts,
                recipe.policy,
                iteration,
                &mut rng,
            )?;
            let anchor = out
                .records
                .iter()
                .find(|r| r.is_largest)
                .unwrap_or(&out.records[0]);
            anchor_sum += anchor.raw_loss;
            anchor_n += 1;
            loss_sum += out.part_losses.iter().sum::<f64>();
            loss_n += out.part_losses.len();
            if let Some(w) = writer.as_mut() {
                for r in &out.records {
                    w.write(r)?;
                }
            }
            records.extend(out.records);
            iteration += 1;
        }
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
        let summary = EpochSummary {
            epoch: epoch + 1,
            iteration,
            anchor_loss: anchor_sum / anchor_n.max(1) as f64,
            mean_loss: loss_sum / loss_n.max(1) as f64,
        };
        if let Some(dir) = &opts.out_dir {
            let path = dir.join(CHECKPOINT_DIR).join(format!("epoch_{:03}.bin", epoch + 1));
            save_state(&path, &handle, optimizer.velocity(), &rng, iteration, epoch + 1, total)?;
        }
        if let Some(cb) = opts.on_epoch.as_mut() {
            cb(&summary);
        }
        epochs.push(summary);
    }
    if let Some(dir) = &opts.out_dir {
        save_state(
            &dir.join(FINAL_CHECKPOINT),
            &handle,
            optimizer.velocity(),
            &rng,
            iteration,
            recipe.epochs,
            total,
        )?;
    }
    handle.bn_mode = BnMode::BatchStatisticsNoAccumulate;
    Ok(SupernetRun {
        handle,
        velocity: optimizer.velocity().to_vec(),
        records,
        epochs,
        total_iterations: total,
        rng,
    })
}

pub fn save_state(
    path: &Path,
    handle: &SupernetHandle<f32>,
    velocity: &[Vec<f32>],
    rng: &ChaCha8Rng,
    iteration: u64,
    epoch: usize,
    total_iterations: u64,
) -> Result<CheckpointManifest> {
    let manifest = CheckpointManifest {
        format_version: 0,
        space_name: handle.space.name.clone(),
        space_hash: handle.space.hash_hex(),
        dtype: String::new(),
        iteration,
        epoch,
        total_iterations,
        bn_mode: handle.bn_mode,
        calibrated_for: handle.calibrated_for.clone(),
        rng: rng.clone(),
        weights_sha256: String::new(),
    };
    checkpoint::save(path, &handle.params, velocity, manifest)
}

/// Loads a trained supernet for evaluation.
pub fn load_supernet(path: &Path, space: &SearchSpace) -> Result<SupernetHandle<f32>> {
    let ck = checkpoint::load::<f32>(path, Some(space))?;
    Ok(SupernetHandle {
        space: space.clone(),
        params: ck.params,
        bn_mode: ck.manifest.bn_mode,
        calibrated_for: ck.manifest.calibrated_for,
    })
}

pub struct RetrainResult {
    pub config: WidthConfig,
    /// Weights of the physically sliced network, BN statistics recalibrated.
    pub handle: SupernetHandle<f32>,
    pub accuracy: f64,
    pub params: u64,
    pub epochs: Vec<EpochSummary>,
}

/// Builds the sliced network for `config` and trains it from a fresh
/// initialization under `recipe` (one part per batch), then recomputes its
/// BN statistics on the calibration split and reports validation top-1.
pub fn retrain_subnet(
    space: &SearchSpace,
    config: &WidthConfig,
    recipe: &TrainRecipe,
    data: &Dataset<f32>,
    on_epoch: Option<&mut dyn FnMut(&EpochSummary)>,
) -> Result<RetrainResult> {
    space.validate(config)?;
    let sliced = space.sliced(config)?;
    let mut r = recipe.clone();
    r.n_parts = 1;
    r.policy = PartitionPolicy::LargestPlusRandom;
    let run = train_supernet(
        &sliced,
        &r,
        data,
        TrainOptions {
            out_dir: None,
            resume: None,
            on_epoch,
        },
    )?;
    let full = sliced.largest_config();
    let cal: Vec<Tensor<f32>> = data
        .calibration
        .batches(recipe.batch_size)
        .into_iter()
        .map(|b| b.images)
        .collect();
    let handle = run.handle.recalibrate_bn(&full, &cal)?;
    let accuracy = evo::accuracy(&handle, &full, &data.validation, recipe.batch_size)?;
    Ok(RetrainResult {
        config: config.clone(),
        params: sliced.params(&full)?,
        handle,
        accuracy,
        epochs: run.epochs,
    })
}

/// One row of the final results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub config_id: String,
    pub widths: WidthConfig,
    pub flops: u64,
    pub params: u64,
    pub proxy_acc: Option<f64>,
    pub retrained_acc: Option<f64>,
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| evo::csv_err(path, e))?;
    w.write_record(["config_id", "widths", "flops", "params", "proxy_acc", "retrained_acc"])
        .map_err(|e| evo::csv_err(path, e))?;
    let f = |v: Option<f64>| v.map(|a| format!("{a:.6}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.config_id.clone(),
            r.widths.to_string(),
            r.flops.to_string(),
            r.params.to_string(),
            f(r.proxy_acc),
            f(r.retrained_acc),
        ])
        .map_err(|e| evo::csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a results or ranked-candidate table, locating columns by header.
/// `config_id` falls back to the `rank` column.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| evo::csv_err(path, e))?;
    let headers = rd.headers().map_err(|e| evo::csv_err(path, e))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let widths_col = col("widths")
        .ok_or_else(|| Error::parse(path, "missing 'widths' column"))?;
    let id_col = col("config_id").or_else(|| col("rank"));
    let (flops_col, params_col) = (col("flops"), col("params"));
    let (proxy_col, retrain_col) = (col("proxy_acc"), col("retrained_acc"));
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| evo::csv_err(path, e))?;
        let get = |i: Option<usize>| i.and_then(|i| rec.get(i)).unwrap_or("").trim().to_string();
        let num = |s: String| -> Result<u64> {
            if s.is_empty() {
                Ok(0)
            } else {
                s.parse().map_err(|e| Error::parse(path, e))
            }
        };
        let opt = |s: String| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| Error::parse(path, e))
            }
        };
        out.push(ResultRow {
            config_id: get(id_col),
            widths: get(Some(widths_col)).parse()?,
            flops: num(get(flops_col))?,
            params: num(get(params_col))?,
            proxy_acc: opt(get(proxy_col))?,
            retrained_acc: opt(get(retrain_col))?,
        });
    }
    Ok(out)
}

/// `[search]` section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    /// Absolute FLOPs target; takes precedence over `target_ratio`.
    #[serde(default)]
    pub target_flops: Option<u64>,
    /// Target as a fraction of the largest configuration's FLOPs.
    #[serde(default = "d_ratio")]
    pub target_ratio: f64,
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub bucket_width: Option<u64>,
    #[serde(default)]
    pub weighting: Weighting,
    #[serde(default = "d_pop")]
    pub population_size: usize,
    #[serde(default = "d_par")]
    pub parent_count: usize,
    #[serde(default = "d_mut")]
    pub mutation_prob: f64,
    #[serde(default = "d_gen")]
    pub generations: usize,
    #[serde(default = "d_cross")]
    pub crossover_fraction: f64,
    #[serde(default = "d_cal_batches")]
    pub calibration_batches: usize,
    #[serde(default = "d_eval_batch")]
    pub eval_batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn d_ratio() -> f64 {
    0.5
}
fn d_pop() -> usize {
    128
}
fn d_par() -> usize {
    64
}
fn d_mut() -> f64 {
    0.2
}
fn d_gen() -> usize {
    20
}
fn d_cross() -> f64 {
    0.5
}
fn d_cal_batches() -> usize {
    100
}
fn d_eval_batch() -> usize {
    256
}

impl Default for SearchSection {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

impl SearchSection {
    pub fn resolve_target(&self, space: &SearchSpace) -> u64 {
        self.target_flops.unwrap_or_else(|| {
            (space.flops_unchecked(&space.largest_config()) as f64 * self.target_ratio).round() as u64
        })
    }

    pub fn evo_config(&self, target_flops: u64, tolerance: f64) -> EvoConfig {
        EvoConfig {
            population_size: self.population_size,
            parent_count: self.parent_count,
            mutation_prob: self.mutation_prob,
            generations: self.generations,
            target_flops,
            tolerance,
            seed: self.seed,
            crossover_fraction: self.crossover_fraction,
            max_trials: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    /// Architecture description path, or `builtin:<name>`.
    pub arch: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// Whole run configuration: `[space]`, `[recipe]`, `[search]`, `[paths]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub space: SpaceSection,
    pub recipe: TrainRecipe,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub paths: PathsSection,
    /// Directory relative paths resolve against; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::parse(origin, e))?;
        cfg.base_dir = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.recipe.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn arch(&self) -> Result<ArchDescription> {
        if self.space.arch.starts_with("builtin:") {
            ArchDescription::load(Path::new(&self.space.arch))
        } else {
            ArchDescription::load(&self.resolve(Path::new(&self.space.arch)))
        }
    }

    pub fn search_space(&self) -> Result<SearchSpace> {
        SearchSpace::from_description(&self.arch()?)
    }
}

/// Calibration batches cut from a split in stored order.
pub fn calibration_batches(split: &Split<f32>, batch_size: usize, max_batches: usize) -> Vec<Tensor<f32>> {
    split
        .batches(batch_size)
        .into_iter()
        .take(max_batches)
        .map(|b| b.images)
        .collect()
}
