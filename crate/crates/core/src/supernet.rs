//! Parallel-subnets supernet: one full-width pass per iteration whose batch
//! is split into `n` parts, each part carrying a different width
//! configuration through per-part channel masks.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    self, BnStats, Gradients, MomentAccumulator, ParamStore, Widths,
};
use crate::ops;
use crate::optim::Sgd;
use crate::records::LossRecord;
use crate::search_space::{SearchSpace, WidthConfig};
use crate::tensor::{Scalar, Tensor};

/// Batch split into equal row blocks, one width configuration per block.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPartition {
    pub n_parts: usize,
    pub part_configs: Vec<WidthConfig>,
    pub batch_size: usize,
    /// Part index that was drawn as the largest-subnet anchor, if any.
    pub largest_part: Option<usize>,
}

impl BatchPartition {
    pub fn new(batch_size: usize, part_configs: Vec<WidthConfig>) -> Result<Self> {
        let n = part_configs.len();
        if n == 0 || batch_size == 0 {
            return Err(Error::Partition("need at least one part and one row".into()));
        }
        if batch_size % n != 0 {
            return Err(Error::Partition(format!(
                "batch size {batch_size} is not divisible into {n} parts"
            )));
        }
        Ok(BatchPartition {
            n_parts: n,
            part_configs,
            batch_size,
            largest_part: None,
        })
    }

    pub fn rows_per_part(&self) -> usize {
        self.batch_size / self.n_parts
    }

    pub fn part_rows(&self, part: usize) -> Range<usize> {
        let r = self.rows_per_part();
        part * r..(part + 1) * r
    }

    fn widths(&self) -> Widths<'_> {
        Widths::Masked {
            parts: &self.part_configs,
            rows_per_part: self.rows_per_part(),
        }
    }
}

/// Which subnets fill the `n` parts of each iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionPolicy {
    /// One largest subnet plus `n - 1` uniformly sampled ones.
    #[default]
    LargestPlusRandom,
    AllRandom,
    SmallestPlusRandom,
    LargestSmallestRandom,
}

impl PartitionPolicy {
    pub fn sample<R: Rng + ?Sized>(
        self,
        space: &SearchSpace,
        n_parts: usize,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<BatchPartition> {
        let mut anchors = Vec::new();
        let mut largest_part = None;
        match self {
            PartitionPolicy::LargestPlusRandom => {
                largest_part = Some(0);
                anchors.push(space.largest_config());
            }
            PartitionPolicy::AllRandom => {}
            PartitionPolicy::SmallestPlusRandom => anchors.push(space.smallest_config()),
            PartitionPolicy::LargestSmallestRandom => {
                largest_part = Some(0);
                anchors.push(space.largest_config());
                if n_parts > 1 {
                    anchors.push(space.smallest_config());
                }
            }
        }
        anchors.truncate(n_parts);
        while anchors.len() < n_parts {
            anchors.push(space.sample_uniform(rng));
        }
        let mut p = BatchPartition::new(batch_size, anchors)?;
        p.largest_part = largest_part;
        Ok(p)
    }
}

/// Binary mask selecting the first `active_channels` channels on the rows of
/// one batch part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMask {
    pub part_index: usize,
    pub row_range: Range<usize>,
    pub active_channels: usize,
    pub layer_channels: usize,
    pub batch_size: usize,
}

pub fn build_mask(
    n: usize,
    b: usize,
    part_index: usize,
    layer_channels: usize,
    active_channels: usize,
) -> Result<ChannelMask> {
    if n == 0 || b % n != 0 {
        return Err(Error::Partition(format!(
            "batch size {b} is not divisible into {n} parts"
        )));
    }
    if part_index >= n {
        return Err(Error::Partition(format!(
            "part {part_index} out of range for {n} parts"
        )));
    }
    if active_channels == 0 || active_channels > layer_channels {
        return Err(Error::Constraint(format!(
            "active channels {active_channels} outside 1..={layer_channels}"
        )));
    }
    let r = b / n;
    Ok(ChannelMask {
        part_index,
        row_range: r * part_index..r * (part_index + 1),
        active_channels,
        layer_channels,
        batch_size: b,
    })
}

impl ChannelMask {
    pub fn entry(&self, row: usize, channel: usize) -> bool {
        self.row_range.contains(&row) && channel < self.active_channels
    }

    /// The mask as a `batch_size x layer_channels` 0/1 matrix.
    pub fn dense(&self) -> Vec<Vec<u8>> {
        (0..self.batch_size)
            .map(|j| {
                (0..self.layer_channels)
                    .map(|k| self.entry(j, k) as u8)
                    .collect()
            })
            .collect()
    }

    /// Elementwise product with a `(batch_size, layer_channels, h, w)`
    /// tensor, broadcasting over the spatial dimensions.
    pub fn apply<T: Scalar>(&self, t: &mut Tensor<T>) -> Result<()> {
        let [n, c, _, _] = t.shape();
        if n != self.batch_size || c != self.layer_channels {
            return Err(Error::Dimension(format!(
                "mask is {}x{}, tensor is {n}x{c}",
                self.batch_size, self.layer_channels
            )));
        }
        let s = t.plane();
        let d = t.data_mut();
        for j in 0..n {
            for k in 0..c {
                if !self.entry(j, k) {
                    d[(j * c + k) * s..][..s].fill(T::zero());
                }
            }
        }
        Ok(())
    }
}

/// Zeroes, on every part's rows, the channels beyond that part's width;
/// equal to the elementwise product with the sum of all part masks.
pub fn apply_partition_masks<T: Scalar>(
    t: &mut Tensor<T>,
    partition: &BatchPartition,
    active: impl Fn(&WidthConfig) -> usize,
) {
    for (i, cfg) in partition.part_configs.iter().enumerate() {
        let rows = partition.part_rows(i);
        ops::mask_rows(t, rows.start, rows.end, active(cfg));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnMode {
    /// Training: normalize with current-batch statistics; running statistics untouched.
    BatchStatisticsNoAccumulate,
    /// Normalize with stored running statistics.
    FrozenStatistics,
    /// Running statistics were recomputed for one configuration.
    Recalibrated,
}

impl BnMode {
    fn stats(self) -> BnStats {
        match self {
            BnMode::BatchStatisticsNoAccumulate => BnStats::Batch,
            BnMode::FrozenStatistics | BnMode::Recalibrated => BnStats::Running,
        }
    }
}

/// The full-width weight-sharing network.
#[derive(Debug, Clone, PartialEq)]
pub struct SupernetHandle<T = f32> {
    pub space: SearchSpace,
    pub params: ParamStore<T>,
    pub bn_mode: BnMode,
    /// Configuration the running statistics were recalibrated for.
    pub calibrated_for: Option<WidthConfig>,
}

pub struct ParallelOutput<T> {
    /// Output of every graph node (index 0 is the input), at full width.
    pub activations: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

pub struct SerialPartOutput<T> {
    pub activations: Vec<Tensor<T>>,
    pub logits: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub iteration: u64,
    pub part_losses: Vec<f64>,
    pub records: Vec<LossRecord>,
}

impl<T: Scalar> SupernetHandle<T> {
    pub fn new<R: Rng + ?Sized>(space: SearchSpace, rng: &mut R) -> Self {
        let params = ParamStore::init(&space, rng);
        SupernetHandle {
            space,
            params,
            bn_mode: BnMode::BatchStatisticsNoAccumulate,
            calibrated_for: None,
        }
    }

    pub fn with_bn_mode(mut self, mode: BnMode) -> Self {
        self.bn_mode = mode;
        self
    }

    fn check_batch(&self, x: &Tensor<T>, partition: &BatchPartition) -> Result<()> {
        if x.rows() != partition.batch_size {
            return Err(Error::Dimension(format!(
                "batch has {} rows, partition expects {}",
                x.rows(),
                partition.batch_size
            )));
        }
        Ok(())
    }

    /// One masked full-width pass carrying every part's subnet.
    pub fn parallel_forward(
        &self,
        x: &Tensor<T>,
        partition: &BatchPartition,
    ) -> Result<ParallelOutput<T>> {
        self.check_batch(x, partition)?;
        let trace = network::forward(
            &self.space,
            &self.params,
            x,
            partition.widths(),
            self.bn_mode.stats(),
            None,
        )?;
        let logits = trace.logits().clone();
        Ok(ParallelOutput {
            activations: trace.outputs,
            logits,
        })
    }

    /// Reference computation: each part's rows run through its physically
    /// sliced subnet on their own.
    pub fn serial_forward_oracle(
        &self,
        x: &Tensor<T>,
        partition: &BatchPartition,
    ) -> Result<Vec<SerialPartOutput<T>>> {
        if self.bn_mode == BnMode::BatchStatisticsNoAccumulate {
            return Err(Error::Constraint(
                "the serial oracle needs frozen BN statistics".into(),
            ));
        }
        self.check_batch(x, partition)?;
        (0..partition.n_parts)
            .map(|i| {
                let rows = partition.part_rows(i);
                let xi = x.rows_range(rows.start, rows.end);
                let trace = network::forward(
                    &self.space,
                    &self.params,
                    &xi,
                    Widths::Sliced(&partition.part_configs[i]),
                    self.bn_mode.stats(),
                    None,
                )?;
                let logits = trace.logits().clone();
                Ok(SerialPartOutput {
                    activations: trace.outputs,
                    logits,
                })
            })
            .collect()
    }

    /// Per-part mean cross-entropy losses and the gradient of their sum,
    /// through one masked pass.
    pub fn parallel_loss_and_grads(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        partition: &BatchPartition,
    ) -> Result<(Vec<f64>, Gradients<T>)> {
        self.check_batch(x, partition)?;
        check_labels(labels, x.rows())?;
        let widths = partition.widths();
        let trace = network::forward(
            &self.space,
            &self.params,
            x,
            widths,
            self.bn_mode.stats(),
            None,
        )?;
        let mut dlogits = Tensor::zeros(trace.logits().shape());
        let losses = (0..partition.n_parts)
            .map(|i| {
                let rows = partition.part_rows(i);
                ops::softmax_cross_entropy(
                    trace.logits(),
                    labels,
                    rows.start,
                    rows.end,
                    Some(&mut dlogits),
                )
            })
            .collect();
        let mut grads = self.params.zero_grads();
        network::backward(&self.space, &self.params, trace, widths, dlogits, &mut grads);
        Ok((losses, grads))
    }

    /// Serial sandwich-style accumulation: every config sees the whole batch
    /// through its own sliced pass; gradients are summed.
    pub fn serial_loss_and_grads(
        &self,
        x: &Tensor<T>,
        labels: &[usize],
        configs: &[WidthConfig],
    ) -> Result<(Vec<f64>, Gradients<T>)> {
        check_labels(labels, x.rows())?;
        let mut grads = self.params.zero_grads();
        let mut losses = Vec::with_capacity(configs.len());
        for cfg in configs {
            let widths = Widths::Sliced(cfg);
            let trace = network::forward(
                &self.space,
                &self.params,
                x,
                widths,
                self.bn_mode.stats(),
                None,
            )?;
            let mut dlogits = Tensor::zeros(trace.logits().shape());
            losses.push(ops::softmax_cross_entropy(
                trace.logits(),
                labels,
                0,
                x.rows(),
                Some(&mut dlogits),
            ));
            network::backward(&self.space, &self.params, trace, widths, dlogits, &mut grads);
        }
        Ok((losses, grads))
    }

    /// Samples a partition, runs the parallel pass, and applies one
    /// optimizer step to the shared weights. Running BN statistics are not
    /// touched.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        optimizer: &mut Sgd<T>,
        lr: f64,
        x: &Tensor<T>,
        labels: &[usize],
        n_parts: usize,
        policy: PartitionPolicy,
        iteration: u64,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        if self.bn_mode != BnMode::BatchStatisticsNoAccumulate {
            return Err(Error::Constraint(
                "supernet training runs with batch statistics".into(),
            ));
        }
        let partition = policy.sample(&self.space, n_parts, x.rows(), rng)?;
        let (losses, grads) = self.parallel_loss_and_grads(x, labels, &partition)?;
        self.finish_step(optimizer, lr, &grads, &partition.part_configs, partition.largest_part, losses, iteration)
    }

    /// Serial counterpart of [`train_step`](Self::train_step): same
    /// sampling, but each subnet runs its own forward-backward on the full
    /// batch.
    #[allow(clippy::too_many_arguments)]
    pub fn serial_train_step<R: Rng + ?Sized>(
        &mut self,
        optimizer: &mut Sgd<T>,
        lr: f64,
        x: &Tensor<T>,
        labels: &[usize],
        n_subnets: usize,
        policy: PartitionPolicy,
        iteration: u64,
        rng: &mut R,
    ) -> Result<StepOutcome> {
        let partition = policy.sample(&self.space, n_subnets, n_subnets, rng)?;
        let (losses, grads) = self.serial_loss_and_grads(x, labels, &partition.part_configs)?;
        self.finish_step(optimizer, lr, &grads, &partition.part_configs, partition.largest_part, losses, iteration)
    }

    #[allow(clippy::too_many_arguments)]
    fn finish_step(
        &mut self,
        optimizer: &mut Sgd<T>,
        lr: f64,
        grads: &Gradients<T>,
        configs: &[WidthConfig],
        largest_part: Option<usize>,
        losses: Vec<f64>,
        iteration: u64,
    ) -> Result<StepOutcome> {
        if let Some(&bad) = losses.iter().find(|l| !l.is_finite()) {
            return Err(Error::Divergence {
                iteration,
                loss: bad,
            });
        }
        optimizer.step(&mut self.params, grads, lr);
        let records = configs
            .iter()
            .zip(&losses)
            .enumerate()
            .map(|(part, (cfg, &loss))| LossRecord {
                iteration,
                part,
                widths: cfg.clone(),
                raw_loss: loss,
                flops: self.space.flops_unchecked(cfg),
                is_largest: largest_part == Some(part),
            })
            .collect();
        Ok(StepOutcome {
            iteration,
            part_losses: losses,
            records,
        })
    }

    /// Recomputes BN running statistics for `config` from a calibration
    /// stream, using exact pooled mean and (biased) variance of every BN
    /// input over all batches. Learned weights are unchanged.
    pub fn recalibrate_bn<'a, I>(&self, config: &WidthConfig, batches: I) -> Result<SupernetHandle<T>>
    where
        I: IntoIterator<Item = &'a Tensor<T>>,
    {
        self.space.validate(config)?;
        let mut acc = MomentAccumulator::new(self.space.num_layers());
        let mut seen = 0;
        for x in batches {
            network::forward(
                &self.space,
                &self.params,
                x,
                Widths::Sliced(config),
                BnStats::Batch,
                Some(&mut acc),
            )?;
            seen += 1;
        }
        if seen == 0 {
            return Err(Error::Calibration("empty calibration stream".into()));
        }
        let mut out = self.clone();
        for (layer, moments) in acc.layers.iter().enumerate() {
            let (Some(m), Some(bn)) = (moments, out.params.layers[layer].bn.as_mut()) else {
                continue;
            };
            let var = m.variance();
            for c in 0..m.mean.len() {
                bn.running_mean[c] = T::from_f64_lossy(m.mean[c]);
                bn.running_var[c] = T::from_f64_lossy(var[c]);
            }
        }
        out.bn_mode = BnMode::Recalibrated;
        out.calibrated_for = Some(config.clone());
        Ok(out)
    }

    /// Logits of one subnet on `x`, using the handle's BN mode.
    pub fn subnet_logits(&self, config: &WidthConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
        let trace = network::forward(
            &self.space,
            &self.params,
            x,
            Widths::Sliced(config),
            self.bn_mode.stats(),
            None,
        )?;
        Ok(trace.logits().clone())
    }
}

fn check_labels(labels: &[usize], rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Dimension(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    Ok(())
}
