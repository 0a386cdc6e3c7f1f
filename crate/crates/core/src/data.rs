//! Datasets: built-in procedural image sets and a CIFAR-10 binary reader,
//! all exposed as train / validation / calibration splits.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Environment variable naming the directory that holds on-disk datasets.
pub const DATA_ROOT_ENV: &str = "CHANPRUNE_DATA_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct Split<T = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T = f32> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Split<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        Ok(Split { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> Batch<T> {
        let [_, c, h, w] = self.images.shape();
        let row = c * h * w;
        let src = self.images.data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        Batch {
            images: Tensor::from_vec([indices.len(), c, h, w], data).expect("gathered shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Consecutive batches in stored order; the last one may be short.
    pub fn batches(&self, batch_size: usize) -> Vec<Batch<T>> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.gather(c)).collect()
    }

    /// Index order of one training epoch: a seeded shuffle, cut into full
    /// batches. Trailing rows that do not fill a batch wrap around to the
    /// front of the permutation so every batch has `batch_size` rows.
    pub fn epoch_order<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
        let mut perm: Vec<usize> = (0..self.len()).collect();
        perm.shuffle(rng);
        let n_batches = self.len().div_ceil(batch_size);
        (0..n_batches)
            .map(|b| {
                (0..batch_size)
                    .map(|j| perm[(b * batch_size + j) % perm.len()])
                    .collect()
            })
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Split<U> {
        Split {
            images: self.images.cast(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T = f32> {
    pub name: String,
    pub num_classes: usize,
    pub train: Split<T>,
    pub validation: Split<T>,
    pub calibration: Split<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn resolution(&self) -> (usize, usize) {
        let [_, _, h, w] = self.train.images.shape();
        (h, w)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            name: self.name.clone(),
            num_classes: self.num_classes,
            train: self.train.cast(),
            validation: self.validation.cast(),
            calibration: self.calibration.cast(),
        }
    }
}

/// Dataset selection as written in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Ten procedurally generated texture classes.
    Synthetic {
        #[serde(default = "d_classes")]
        classes: usize,
        #[serde(default = "d_train")]
        train: usize,
        #[serde(default = "d_val")]
        validation: usize,
        #[serde(default = "d_cal")]
        calibration: usize,
        #[serde(default = "d_res")]
        resolution: usize,
        #[serde(default = "d_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Two classes separated by the sign of a fixed pattern.
    Separable {
        #[serde(default = "d_train")]
        train: usize,
        #[serde(default = "d_val")]
        validation: usize,
        #[serde(default = "d_cal")]
        calibration: usize,
        #[serde(default = "d_res")]
        resolution: usize,
        #[serde(default)]
        seed: u64,
    },
    /// CIFAR-10 binary batches (`data_batch_*.bin`, `test_batch.bin`).
    Cifar10 {
        /// Directory holding the batches; relative paths resolve against
        /// the data-root environment variable when set.
        #[serde(default)]
        root: Option<PathBuf>,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        validation_limit: Option<usize>,
        #[serde(default = "d_cal")]
        calibration: usize,
    },
}

fn d_classes() -> usize {
    10
}
fn d_train() -> usize {
    2048
}
fn d_val() -> usize {
    1024
}
fn d_cal() -> usize {
    512
}
fn d_res() -> usize {
    32
}
fn d_noise() -> f64 {
    2.0
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            classes: d_classes(),
            train: d_train(),
            validation: d_val(),
            calibration: d_cal(),
            resolution: d_res(),
            noise: d_noise(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset<f32>> {
        match *self {
            DatasetSpec::Synthetic {
                classes,
                train,
                validation,
                calibration,
                resolution,
                noise,
                seed,
            } => synthetic_textures(classes, [train, validation, calibration], resolution, noise, seed),
            DatasetSpec::Separable {
                train,
                validation,
                calibration,
                resolution,
                seed,
            } => separable(
                [train, validation, calibration],
                resolution,
                seed,
            ),
            DatasetSpec::Cifar10 {
                ref root,
                train_limit,
                validation_limit,
                calibration,
            } => {
                let dir = resolve_root(root.as_deref())?;
                cifar10(&dir, train_limit, validation_limit, calibration)
            }
        }
    }
}

fn resolve_root(root: Option<&Path>) -> Result<PathBuf> {
    let env = std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from);
    match (root, env) {
        (Some(r), Some(base)) if r.is_relative() => Ok(base.join(r)),
        (Some(r), _) => Ok(r.to_path_buf()),
        (None, Some(base)) => Ok(base.join("cifar-10-batches-bin")),
        (None, None) => Err(Error::Dataset(format!(
            "no dataset root given and {DATA_ROOT_ENV} is not set"
        ))),
    }
}

struct Grating {
    fx: f64,
    fy: f64,
    phase: f64,
    color: [f64; 3],
}

/// Class prototypes are sums of oriented sinusoidal gratings with
/// class-specific frequencies and colors. Each sample is its class
/// prototype under a random circular shift, random contrast, an additive
/// distractor from another class, and Gaussian pixel noise.
pub fn synthetic_textures(
    classes: usize,
    sizes: [usize; 3],
    resolution: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset<f32>> {
    if classes < 2 || resolution == 0 {
        return Err(Error::Dataset("need at least two classes and a positive resolution".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_7e47);
    let r = resolution as f64;
    let protos: Vec<Vec<f32>> = (0..classes)
        .map(|_| {
            let gratings: Vec<Grating> = (0..3)
                .map(|_| {
                    let freq = rng.random_range(1.0..4.0);
                    let theta = rng.random_range(0.0..std::f64::consts::PI);
                    Grating {
                        fx: freq * theta.cos() / r,
                        fy: freq * theta.sin() / r,
                        phase: rng.random_range(0.0..std::f64::consts::TAU),
                        color: [
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ],
                    }
                })
                .collect();
            let mut img = vec![0f32; 3 * resolution * resolution];
            for c in 0..3 {
                for y in 0..resolution {
                    for x in 0..resolution {
                        let v: f64 = gratings
                            .iter()
                            .map(|g| {
                                g.color[c]
                                    * (std::f64::consts::TAU * (g.fx * x as f64 + g.fy * y as f64)
                                        + g.phase)
                                        .sin()
                            })
                            .sum();
                        img[(c * resolution + y) * resolution + x] = v as f32;
                    }
                }
            }
            img
        })
        .collect();

    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Dataset(e.to_string()))?;
    let plane = resolution * resolution;
    let make = |n: usize, rng: &mut ChaCha8Rng| -> Split<f32> {
        let mut data = Vec::with_capacity(n * 3 * plane);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % classes;
            let other = (label + rng.random_range(1..classes)) % classes;
            let dx = rng.random_range(0..resolution);
            let dy = rng.random_range(0..resolution);
            let contrast = rng.random_range(0.6..1.2);
            let mix = rng.random_range(0.0..0.6);
            let offset: f64 = rng.random_range(-0.3..0.3);
            for c in 0..3 {
                for y in 0..resolution {
                    for x in 0..resolution {
                        let sy = (y + dy) % resolution;
                        let sx = (x + dx) % resolution;
                        let k = (c * resolution + sy) * resolution + sx;
                        let v = contrast * protos[label][k] as f64
                            + mix * protos[other][k] as f64
                            + offset
                            + normal.sample(rng);
                        data.push(v as f32);
                    }
                }
            }
            labels.push(label);
        }
        let images = Tensor::from_vec([n, 3, resolution, resolution], data).expect("synthetic shape");
        Split { images, labels }
    };
    let train = make(sizes[0], &mut rng);
    let validation = make(sizes[1], &mut rng);
    let calibration = make(sizes[2], &mut rng);
    Ok(Dataset {
        name: "synthetic".into(),
        num_classes: classes,
        train,
        validation,
        calibration,
    })
}

/// Two classes: `+pattern` and `-pattern` plus small noise.
pub fn separable(sizes: [usize; 3], resolution: usize, seed: u64) -> Result<Dataset<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x2c1a55);
    let len = 3 * resolution * resolution;
    let pattern: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    let normal = Normal::new(0.0, 0.3).expect("valid sigma");
    let make = |n: usize, rng: &mut ChaCha8Rng| -> Split<f32> {
        let mut data = Vec::with_capacity(n * len);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = i % 2;
            let sign = if label == 0 { 1.0 } else { -1.0 };
            data.extend(pattern.iter().map(|p| (sign * p + normal.sample(rng)) as f32));
            labels.push(label);
        }
        Split {
            images: Tensor::from_vec([n, 3, resolution, resolution], data).expect("separable shape"),
            labels,
        }
    };
    let train = make(sizes[0], &mut rng);
    let validation = make(sizes[1], &mut rng);
    let calibration = make(sizes[2], &mut rng);
    Ok(Dataset {
        name: "separable".into(),
        num_classes: 2,
        train,
        validation,
        calibration,
    })
}

const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

fn read_cifar_file(path: &Path, limit: usize, data: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "{}: size {} is not a multiple of {CIFAR_RECORD}",
            path.display(),
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if labels.len() >= limit {
            break;
        }
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Dataset(format!("{}: label {label} out of range", path.display())));
        }
        labels.push(label);
        for (i, &b) in rec[1..].iter().enumerate() {
            let c = i / 1024;
            data.push((b as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]);
        }
    }
    Ok(())
}

/// Reads CIFAR-10 binary batches. The calibration split is the first
/// `calibration` training images.
pub fn cifar10(
    dir: &Path,
    train_limit: Option<usize>,
    validation_limit: Option<usize>,
    calibration: usize,
) -> Result<Dataset<f32>> {
    let mut tr_data = Vec::new();
    let mut tr_labels = Vec::new();
    let tl = train_limit.unwrap_or(usize::MAX);
    for i in 1..=5 {
        read_cifar_file(&dir.join(format!("data_batch_{i}.bin")), tl, &mut tr_data, &mut tr_labels)?;
    }
    let mut va_data = Vec::new();
    let mut va_labels = Vec::new();
    read_cifar_file(
        &dir.join("test_batch.bin"),
        validation_limit.unwrap_or(usize::MAX),
        &mut va_data,
        &mut va_labels,
    )?;
    let train = Split::new(Tensor::from_vec([tr_labels.len(), 3, 32, 32], tr_data)?, tr_labels)?;
    let validation = Split::new(Tensor::from_vec([va_labels.len(), 3, 32, 32], va_data)?, va_labels)?;
    let cal_idx: Vec<usize> = (0..calibration.min(train.len())).collect();
    let cb = train.gather(&cal_idx);
    Ok(Dataset {
        name: "cifar10".into(),
        num_classes: 10,
        calibration: Split {
            images: cb.images,
            labels: cb.labels,
        },
        train,
        validation,
    })
}
