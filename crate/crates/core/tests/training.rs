mod common;

use chanprune::arch::{builtin, ArchDescription};
use chanprune::checkpoint;
use chanprune::data::{self, DatasetSpec};
use chanprune::evo;
use chanprune::optim::OptimizerSpec;
use chanprune::records::{read_jsonl, LossRecord};
use chanprune::supernet::{BnMode, PartitionPolicy, SupernetHandle};
use chanprune::trainer::{self, TrainOptions, TrainRecipe};
use chanprune::{SearchSpace, Tensor, WidthConfig};
use common::normal_vec;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn desk() -> SearchSpace {
    SearchSpace::from_description(&builtin("desk").unwrap()).unwrap()
}

fn small_recipe(epochs: usize) -> TrainRecipe {
    TrainRecipe {
        epochs,
        batch_size: 32,
        n_parts: 4,
        optimizer: OptimizerSpec::sgd(0.05),
        seed: 7,
        dataset: DatasetSpec::Synthetic {
            classes: 10,
            train: 128,
            validation: 64,
            calibration: 64,
            resolution: 32,
            noise: 2.0,
            seed: 1,
        },
        policy: PartitionPolicy::LargestPlusRandom,
    }
}

#[test]
fn record_count_is_iterations_times_parts_and_runs_repeat() {
    let space = desk();
    let recipe = small_recipe(2);
    let data = recipe.dataset.load().unwrap();
    let a = trainer::train_supernet(&space, &recipe, &data, TrainOptions::default()).unwrap();
    let iterations = recipe.iterations_per_epoch(data.train.len()) * recipe.epochs as u64;
    assert_eq!(iterations, 8);
    assert_eq!(a.records.len() as u64, iterations * recipe.n_parts as u64);
    assert_eq!(a.total_iterations, iterations);
    for t in 0..iterations {
        let step: Vec<&LossRecord> = a.records.iter().filter(|r| r.iteration == t).collect();
        assert_eq!(step.len(), 4);
        assert_eq!(step.iter().filter(|r| r.is_largest).count(), 1);
    }
    let b = trainer::train_supernet(&space, &recipe, &data, TrainOptions::default()).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.handle.params, b.handle.params);
    assert_eq!(a.handle.bn_mode, BnMode::BatchStatisticsNoAccumulate);
}

#[test]
fn streamed_records_match_in_memory_records() {
    let space = desk();
    let recipe = small_recipe(1);
    let data = recipe.dataset.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let run = trainer::train_supernet(
        &space,
        &recipe,
        &data,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        },
    )
    .unwrap();
    let streamed: Vec<LossRecord> = read_jsonl(&dir.path().join(trainer::RECORDS_FILE)).unwrap();
    assert_eq!(streamed, run.records);
    let ck = checkpoint::load::<f32>(&dir.path().join(trainer::FINAL_CHECKPOINT), Some(&space)).unwrap();
    assert_eq!(ck.manifest.total_iterations, run.total_iterations);
    assert_eq!(ck.manifest.bn_mode, BnMode::BatchStatisticsNoAccumulate);
}

#[test]
fn checkpoint_round_trip_is_bit_identical_and_continues_rng() {
    let space = desk();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut handle = SupernetHandle::<f32>::new(space.clone(), &mut rng);
    common::randomize_affine(&mut handle.params, &mut rng);
    let velocity: Vec<Vec<f32>> = (0..3).map(|i| normal_vec(&mut rng, 10 + i, 1.0)).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.bin");
    trainer::save_state(&path, &handle, &velocity, &rng, 5, 1, 10).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let ck = checkpoint::load::<f32>(&path, Some(&space)).unwrap();
    let to_bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    for (a, b) in handle.params.layers.iter().zip(&ck.params.layers) {
        assert_eq!(to_bits(&a.weight), to_bits(&b.weight));
    }
    assert_eq!(ck.params, handle.params);
    assert_eq!(ck.velocity, velocity);
    let mut restored = ck.manifest.rng.clone();
    for _ in 0..16 {
        assert_eq!(restored.next_u64(), rng.next_u64());
    }
    let again = dir.path().join("again.bin");
    checkpoint::save(&again, &ck.params, &ck.velocity, ck.manifest.clone()).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), bytes);

    let other = SearchSpace::from_description(&builtin("vgg16").unwrap()).unwrap();
    assert!(checkpoint::load::<f32>(&path, Some(&other)).is_err());
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let space = desk();
    let recipe = small_recipe(2);
    let data = recipe.dataset.load().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let full = trainer::train_supernet(
        &space,
        &recipe,
        &data,
        TrainOptions {
            out_dir: Some(dir.path().join("full")),
            ..Default::default()
        },
    )
    .unwrap();
    let epoch1 = dir.path().join("full").join(trainer::CHECKPOINT_DIR).join("epoch_001.bin");
    let ck = checkpoint::load::<f32>(&epoch1, Some(&space)).unwrap();
    let resumed = trainer::train_supernet(
        &space,
        &recipe,
        &data,
        TrainOptions {
            out_dir: None,
            resume: Some(ck),
            on_epoch: None,
        },
    )
    .unwrap();
    let per_epoch = recipe.iterations_per_epoch(data.train.len());
    let tail: Vec<LossRecord> = full.records.iter().filter(|r| r.iteration >= per_epoch).cloned().collect();
    assert_eq!(resumed.records, tail);
    assert_eq!(resumed.handle.params, full.handle.params);
    assert_eq!(resumed.velocity, full.velocity);
}

/// One 1x1 conv with BN on 3 input channels, then a linear head.
fn bn_space() -> SearchSpace {
    let text = r#"
        name = "bn-probe"
        input_channels = 3
        reference_resolution = [4, 4]
        group_count = 4
        min_keep_ratio = 0.0
        [[layers]]
        name = "conv"
        kind = "conv"
        max_out_channels = 8
        kernel = 1
        bn = true
        relu = true
        [[layers]]
        name = "fc"
        kind = "linear"
        max_out_channels = 3
        group_count = 1
    "#;
    SearchSpace::from_description(&ArchDescription::from_toml_str(text).unwrap()).unwrap()
}

#[test]
fn recalibration_matches_two_pass_statistics() {
    let space = bn_space();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let handle = SupernetHandle::<f64>::new(space.clone(), &mut rng);
    let batches: Vec<Tensor<f64>> = (0..5)
        .map(|i| {
            let rows = 3 + i;
            let mut v: Vec<f64> = normal_vec(&mut rng, rows * 3 * 16, 1.5);
            v.iter_mut().for_each(|x| *x += 0.7);
            Tensor::from_vec([rows, 3, 4, 4], v).unwrap()
        })
        .collect();
    let config = WidthConfig::new(vec![6, 3]);
    let before = handle.params.clone();
    let cal = handle.recalibrate_bn(&config, &batches).unwrap();
    assert_eq!(handle.params, before);
    assert_eq!(cal.bn_mode, BnMode::Recalibrated);
    assert_eq!(cal.calibrated_for.as_ref(), Some(&config));

    // Conv outputs computed directly, then mean and variance in two passes.
    let w = &handle.params.layers[0].weight;
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); 6];
    for x in &batches {
        for n in 0..x.rows() {
            for (c, vals) in values.iter_mut().enumerate() {
                for y in 0..4 {
                    for xx in 0..4 {
                        let v: f64 = (0..3).map(|i| w[c * 3 + i] * x.at(n, i, y, xx)).sum();
                        vals.push(v);
                    }
                }
            }
        }
    }
    let bn = cal.params.layers[0].bn.as_ref().unwrap();
    for (c, vals) in values.iter().enumerate() {
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        let rel = |a: f64, b: f64| (a - b).abs() / b.abs().max(1e-12);
        assert!(rel(bn.running_mean[c], mean) <= 1e-4, "mean {c}: {} vs {mean}", bn.running_mean[c]);
        assert!(rel(bn.running_var[c], var) <= 1e-4, "var {c}: {} vs {var}", bn.running_var[c]);
    }
    // channels beyond the calibrated width keep their previous statistics
    let old = before.layers[0].bn.as_ref().unwrap();
    assert_eq!(bn.running_mean[6..], old.running_mean[6..]);
    assert_eq!(bn.running_var[6..], old.running_var[6..]);
}

#[test]
fn constant_stream_gives_zero_variance() {
    let space = bn_space();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let handle = SupernetHandle::<f32>::new(space.clone(), &mut rng);
    let batches: Vec<Tensor<f32>> = (0..3).map(|_| Tensor::filled([4, 3, 4, 4], 0.8)).collect();
    let cal = handle.recalibrate_bn(&space.largest_config(), &batches).unwrap();
    let bn = cal.params.layers[0].bn.as_ref().unwrap();
    assert!(bn.running_var.iter().all(|&v| v.abs() <= 1e-6), "{:?}", bn.running_var);
}

#[test]
fn separable_set_trains_cleanly() {
    let space = desk();
    let mut recipe = small_recipe(6);
    recipe.batch_size = 64;
    // slow enough that the easy task is not solved within the first epoch
    recipe.optimizer = OptimizerSpec::sgd(0.003);
    recipe.dataset = DatasetSpec::Separable {
        train: 512,
        validation: 256,
        calibration: 128,
        resolution: 32,
        seed: 4,
    };
    let data = recipe.dataset.load().unwrap();
    let run = trainer::train_supernet(&space, &recipe, &data, TrainOptions::default()).unwrap();
    let losses: Vec<f64> = run.epochs.iter().map(|e| e.anchor_loss).collect();
    for pair in losses[..5].windows(2) {
        assert!(pair[1] < pair[0], "largest-subnet loss by epoch: {losses:?}");
    }
    let cal = trainer::calibration_batches(&data.calibration, 64, 2);
    let acc = evo::proxy_accuracy(&run.handle, &space.largest_config(), &data.validation, &cal, 128).unwrap();
    assert!(acc >= 0.95, "largest-config accuracy {acc}");
    let again = evo::proxy_accuracy(&run.handle, &space.largest_config(), &data.validation, &cal, 128).unwrap();
    assert_eq!(acc, again);
}

#[test]
fn retrained_network_has_the_configured_parameter_count() {
    let space = desk();
    let recipe = small_recipe(1);
    let data = recipe.dataset.load().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..2 {
        let cfg = space.sample_uniform(&mut rng);
        let result = trainer::retrain_subnet(&space, &cfg, &recipe, &data, None).unwrap();
        assert_eq!(result.params, space.params(&cfg).unwrap());
        let trainable: usize = result
            .handle
            .params
            .layers
            .iter()
            .map(|l| {
                l.weight.len()
                    + l.bias.as_ref().map_or(0, Vec::len)
                    + l.bn.as_ref().map_or(0, |b| b.gamma.len() + b.beta.len())
            })
            .sum();
        assert_eq!(trainable as u64, result.params);
        assert!((0.0..=1.0).contains(&result.accuracy));
    }
}

#[test]
fn dataset_shape_mismatch_is_reported() {
    let space = desk();
    let recipe = small_recipe(1);
    let data = data::separable([64, 32, 32], 16, 0).unwrap();
    let err = trainer::train_supernet(&space, &recipe, &data, TrainOptions::default()).err().unwrap();
    assert!(matches!(err, chanprune::Error::Dataset(_)), "{err}");
}
