//! Acceptance gate. Each test checks one criterion at its stated tolerance
//! and prints a single PASS/FAIL line. Tests take a shared lock so timings
//! are not disturbed by one another.

mod common;

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use chanprune::arch::builtin;
use chanprune::data::Dataset;
use chanprune::evo::{self, EvoConfig, FnEvaluator, SearchContext, SupernetEvaluator};
use chanprune::optim::{OptimizerSpec, Sgd};
use chanprune::prior::{self, build_distribution, ProxyLossTable, Weighting};
use chanprune::records::LossRecord;
use chanprune::supernet::{BatchPartition, BnMode, PartitionPolicy, SupernetHandle};
use chanprune::trainer::{self, TrainOptions, TrainRecipe};
use chanprune::{Scalar, SearchSpace, Tensor, WidthConfig};
use common::*;
use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

static LOCK: Mutex<()> = Mutex::new(());

fn serial() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(criterion: u32, name: &str, pass: bool, detail: String) {
    // written to the raw handle so the line shows even when output is captured
    let line = format!(
        "[acceptance] criterion {criterion:>2} {name}: {} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn desk() -> SearchSpace {
    SearchSpace::from_description(&builtin("desk").unwrap()).unwrap()
}

// ---------------------------------------------------------------- 1

struct EquivalenceStats {
    max_active: f64,
    masked_nonzero: usize,
    compared: usize,
}

fn equivalence_case<T: Scalar>(seed: u64, n: usize, rows_per_part: usize) -> EquivalenceStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let desc = random_arch(&mut rng);
    let space = SearchSpace::from_description(&desc).unwrap();
    let mut handle = SupernetHandle::<T>::new(space.clone(), &mut rng).with_bn_mode(BnMode::FrozenStatistics);
    randomize_affine(&mut handle.params, &mut rng);
    let b = n * rows_per_part;
    let configs: Vec<WidthConfig> = (0..n).map(|_| space.sample_uniform(&mut rng)).collect();
    let partition = BatchPartition::new(b, configs.clone()).unwrap();
    let x: Tensor<T> = random_input(&mut rng, &space, b);

    let par = handle.parallel_forward(&x, &partition).unwrap();
    let ser = handle.serial_forward_oracle(&x, &partition).unwrap();
    let mut stats = EquivalenceStats {
        max_active: 0.0,
        masked_nonzero: 0,
        compared: 0,
    };
    for (i, part) in ser.iter().enumerate() {
        let rows = partition.part_rows(i);
        for node in 1..space.graph.nodes.len() {
            let p = &par.activations[node];
            let s = &part.activations[node];
            let [_, full_c, h, w] = p.shape();
            let active = space.node_channels(node, &configs[i]);
            assert_eq!(s.shape(), [rows_per_part, active, h, w]);
            for (ri, r) in rows.clone().enumerate() {
                for c in 0..full_c {
                    for y in 0..h {
                        for xx in 0..w {
                            let pv = p.at(r, c, y, xx);
                            if c < active {
                                let d = (pv.as_f64() - s.at(ri, c, y, xx).as_f64()).abs();
                                stats.max_active = stats.max_active.max(d);
                                stats.compared += 1;
                            } else if pv != T::zero() {
                                stats.masked_nonzero += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    stats
}

#[test]
fn criterion_01_serial_parallel_equivalence() {
    let _g = serial();
    let start = Instant::now();
    let cases = 240u64;
    let (mut max32, mut max64, mut masked, mut compared) = (0.0f64, 0.0f64, 0usize, 0usize);
    for seed in 0..cases {
        let n = if seed % 2 == 0 { 2 } else { 4 };
        let rows = 1 + (seed as usize / 2) % 2;
        let a = equivalence_case::<f32>(seed, n, rows);
        let b = equivalence_case::<f64>(seed, n, rows);
        max32 = max32.max(a.max_active);
        max64 = max64.max(b.max_active);
        masked += a.masked_nonzero + b.masked_nonzero;
        compared += a.compared + b.compared;
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = compared > 0 && max32 <= 1e-5 && max64 <= 1e-12 && masked == 0 && secs <= 120.0;
    report(
        1,
        "serial/parallel equivalence",
        pass,
        format!(
            "{cases} cases, {compared} values, max |d| f32 {max32:.2e}, f64 {max64:.2e}, nonzero masked {masked}, {secs:.1}s"
        ),
    );
}

// ---------------------------------------------------------------- 2

fn two_layer_space() -> SearchSpace {
    let text = r#"
        name = "two-layer"
        input_channels = 2
        reference_resolution = [4, 4]
        group_count = 2
        [[layers]]
        name = "conv"
        kind = "conv"
        max_out_channels = 4
        kernel = 3
        [[layers]]
        name = "fc"
        kind = "linear"
        max_out_channels = 3
        group_count = 1
    "#;
    let desc = chanprune::arch::ArchDescription::from_toml_str(text).unwrap();
    SearchSpace::from_description(&desc).unwrap()
}

fn nudge(handle: &mut SupernetHandle<f64>, index: usize, delta: f64) {
    let grads = handle.params.zero_grads();
    let mut offset = 0;
    handle.params.for_each_trainable_mut(&grads, |_, _, w, _| {
        if index >= offset && index < offset + w.len() {
            w[index - offset] += delta;
        }
        offset += w.len();
    });
}

#[test]
fn criterion_02_gradient_check() {
    let _g = serial();
    let start = Instant::now();
    let space = two_layer_space();
    let h = 1e-5;
    let (mut worst, mut checked, mut failures) = (0.0f64, 0usize, 0usize);
    for seed in 0..24u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut handle = SupernetHandle::<f64>::new(space.clone(), &mut rng);
        randomize_affine(&mut handle.params, &mut rng);
        let configs = (0..2).map(|_| space.sample_uniform(&mut rng)).collect();
        let partition = BatchPartition::new(4, configs).unwrap();
        let x: Tensor<f64> = random_input(&mut rng, &space, 4);
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let (_, grads) = handle.parallel_loss_and_grads(&x, &labels, &partition).unwrap();
        let analytic = grads.flat();
        let loss = |hd: &SupernetHandle<f64>| -> f64 {
            hd.parallel_loss_and_grads(&x, &labels, &partition).unwrap().0.iter().sum()
        };
        for (i, &g) in analytic.iter().enumerate() {
            nudge(&mut handle, i, h);
            let up = loss(&handle);
            nudge(&mut handle, i, -2.0 * h);
            let down = loss(&handle);
            nudge(&mut handle, i, h);
            let fd = (up - down) / (2.0 * h);
            let err = (g - fd).abs();
            let scale = g.abs().max(fd.abs());
            let rel = if scale > 0.0 { err / scale } else { 0.0 };
            if scale > 1e-6 {
                worst = worst.max(rel);
            }
            if err > 1e-8 && rel > 1e-3 {
                failures += 1;
            }
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures == 0 && secs <= 60.0;
    report(
        2,
        "gradient check",
        pass,
        format!("24 seeds, {checked} entries, worst relative error {worst:.2e}, {failures} over 1e-3, {secs:.1}s"),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_cost_model() {
    let _g = serial();
    let within = |v: u64, target: f64| ((v as f64 - target) / target).abs() <= 0.02;
    let r50 = SearchSpace::from_description(&builtin("resnet50").unwrap()).unwrap();
    let mb2 = SearchSpace::from_description(&builtin("mobilenetv2").unwrap()).unwrap();
    let rf = r50.flops(&r50.largest_config()).unwrap();
    let rp = r50.params(&r50.largest_config()).unwrap();
    let mf = mb2.flops(&mb2.largest_config()).unwrap();
    let mp = mb2.params(&mb2.largest_config()).unwrap();
    let pass = within(rf, 4.1e9) && within(rp, 25.5e6) && within(mf, 300e6) && within(mp, 3.5e6);
    report(
        3,
        "cost model",
        pass,
        format!("ResNet50 {rf} FLOPs / {rp} params, MobileNetV2 {mf} FLOPs / {mp} params"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_search_space_arithmetic() {
    let _g = serial();
    let big = chain_space(50, 40, 20, 0.0);
    let size = big.space_size();
    let exact = size == BigUint::from(20u32).pow(50);

    let mut agree = true;
    let mut detail = Vec::new();
    let mut spaces = vec![desk()];
    spaces.push(chain_space(4, 16, 8, 0.2));
    let coupled = {
        let spec = |n: &str, g: Option<&str>| {
            let s = chanprune::LayerSpec::new(n, chanprune::LayerKind::StandardConv, 24, (3, 3), (4, 4), 6).unwrap();
            match g {
                Some(g) => s.with_coupling(g),
                None => s,
            }
        };
        SearchSpace::chain(
            "coupled",
            3,
            vec![spec("a", Some("x")), spec("b", None), spec("c", Some("x")), spec("d", Some("y")), spec("e", Some("y"))],
            0.2,
        )
        .unwrap()
    };
    spaces.push(coupled);
    for s in &spaces {
        let all: Vec<WidthConfig> = s.enumerate().collect();
        let distinct: std::collections::HashSet<&WidthConfig> = all.iter().collect();
        let valid = all.iter().all(|c| s.validate(c).is_ok());
        let ok = BigUint::from(all.len()) == s.space_size() && distinct.len() == all.len() && valid;
        agree &= ok;
        detail.push(format!("{}={}", s.name, all.len()));
    }
    report(
        4,
        "search-space arithmetic",
        exact && agree,
        format!("20^50 exact: {exact}; enumeration {}", detail.join(", ")),
    );
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_prior_fixtures() {
    let _g = serial();
    let space = chain_space(2, 32, 2, 0.2);
    let cfg = |a, b| WidthConfig::new(vec![a, b]);
    let records = vec![
        record(&space, 0, 0, cfg(32, 32), 2.0, true),
        record(&space, 0, 1, cfg(16, 32), 3.0, false),
        record(&space, 1, 0, cfg(32, 32), 1.0, true),
    ];
    // Proxies: 2/1*2 = 4, 2/1*3 = 6, 1/1*1 = 1. Layer 0 sees 16 once (p=6)
    // and 32 twice (p=4, p=1); layer 1 only ever 32.
    let expected = [
        (Weighting::Frequency, [1.0 / 3.0, 2.0 / 3.0]),
        (Weighting::LiteralProxy, [6.0 / 11.0, 5.0 / 11.0]),
        (Weighting::InverseProxy, [2.0 / 17.0, 15.0 / 17.0]),
    ];
    let mut max_err = 0.0f64;
    let mut ok = true;
    for (w, [p16, p32]) in expected {
        let d = build_distribution(&records, &space, u64::MAX / 4, w).unwrap();
        let b = d.bucket_of(records[0].flops);
        assert_eq!(b, d.bucket_of(records[1].flops));
        let l0 = &d.weights[b][0];
        let l1 = &d.weights[b][1];
        max_err = max_err
            .max((l0[&16] - p16).abs())
            .max((l0[&32] - p32).abs())
            .max((l1[&32] - 1.0).abs())
            .max(l1[&16].abs());
        ok &= !d.fallback_flags[b];
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let big = chain_space(12, 64, 8, 0.2);
    let recs = simulated_records(&big, 400, 4, &mut rng);
    let mut worst_norm = 0.0f64;
    let mut negative = false;
    for w in [Weighting::Frequency, Weighting::LiteralProxy, Weighting::InverseProxy] {
        let d = build_distribution(&recs, &big, prior::default_bucket_width(&big), w).unwrap();
        for bucket in &d.weights {
            for cell in bucket {
                worst_norm = worst_norm.max((cell.values().sum::<f64>() - 1.0).abs());
                negative |= cell.values().any(|&v| v < 0.0);
            }
        }
    }
    let pass = ok && max_err <= 1e-12 && worst_norm <= 1e-9 && !negative;
    report(
        5,
        "prior distribution fixtures",
        pass,
        format!("fixture max error {max_err:.1e}, worst normalization error {worst_norm:.1e}"),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_sampling_efficiency() {
    let _g = serial();
    let start = Instant::now();
    let space = chain_space(50, 64, 8, 0.0);
    let max = space.flops(&space.largest_config()).unwrap();
    let tolerance = 0.02 * max as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let records = simulated_records(&space, 5000, 4, &mut rng);
    let dist = build_distribution(&records, &space, prior::default_bucket_width(&space), Weighting::InverseProxy).unwrap();

    let mut uniform_flops: Vec<u64> = records.iter().filter(|r| !r.is_largest).map(|r| r.flops).collect();
    uniform_flops.sort_unstable();
    let q = |f: f64| uniform_flops[((uniform_flops.len() - 1) as f64 * f) as usize];
    let (lo, hi) = (q(0.005), q(0.995));
    let cap = 1_000_000u64;
    let (mut prior_trials, mut uniform_trials, mut capped) = (0u64, 0u64, 0usize);
    for i in 0..1000u64 {
        let target = lo + (hi - lo) * i / 999;
        let a = prior::sample_conditioned(&dist, &space, target, tolerance, &mut rng, cap);
        let b = prior::sample_uniform_constrained(&space, target, tolerance, &mut rng, cap);
        prior_trials += a.map(|(_, t)| t).unwrap_or_else(|_| {
            capped += 1;
            cap
        });
        uniform_trials += b.map(|(_, t)| t).unwrap_or_else(|_| {
            capped += 1;
            cap
        });
    }
    let mp = prior_trials as f64 / 1000.0;
    let mu = uniform_trials as f64 / 1000.0;
    let secs = start.elapsed().as_secs_f64();
    let pass = mp <= 0.5 * mu && secs <= 300.0;
    report(
        6,
        "sampling efficiency",
        pass,
        format!(
            "mean trials prior {mp:.2} vs uniform {mu:.2} (ratio {:.3}), {capped} capped, {secs:.1}s",
            mp / mu
        ),
    );
}

// ---------------------------------------------------------------- 7

#[test]
fn criterion_07_evolution_finds_optimum() {
    let _g = serial();
    let space = chain_space(4, 16, 8, 0.0);
    assert_eq!(space.space_size(), BigUint::from(4096u32));
    let max = space.flops(&space.largest_config()).unwrap();
    let target = max / 2;
    let tolerance = 0.05 * max as f64;
    let fitness = |c: &WidthConfig| -> f64 {
        let weighted: f64 = c.widths.iter().enumerate().map(|(i, &w)| (i + 1) as f64 * w as f64).sum();
        let mut h: u64 = 1469598103934665603;
        for &w in &c.widths {
            h = (h ^ w as u64).wrapping_mul(1099511628211);
        }
        weighted / 160.0 + (h % 1000) as f64 / 4000.0
    };
    let mut feasible: Vec<evo::Candidate> = space
        .enumerate()
        .filter(|c| (space.flops(c).unwrap().abs_diff(target) as f64) <= tolerance)
        .map(|c| {
            let mut cand = evo::Candidate::new(&space, c).unwrap();
            cand.proxy_accuracy = Some(fitness(&cand.config));
            cand
        })
        .collect();
    feasible.sort_by(evo::rank_order);
    let optimum = feasible[0].config.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let records = simulated_records(&space, 300, 4, &mut rng);
    let table = ProxyLossTable::from_records(&records).unwrap();
    let dist = build_distribution(&records, &space, prior::default_bucket_width(&space), Weighting::InverseProxy).unwrap();
    let ctx = SearchContext {
        space: &space,
        dist: &dist,
        records: &records,
        table: Some(&table),
        weighting: Weighting::InverseProxy,
    };
    let mut hits = 0;
    for seed in 0..10 {
        let mut cfg = EvoConfig::new(target, tolerance);
        cfg.population_size = 32;
        cfg.parent_count = 16;
        cfg.generations = 20;
        cfg.seed = seed;
        let mut ev = FnEvaluator(fitness);
        let ranked = evo::search(&ctx, &cfg, &mut ev, None).unwrap();
        if ranked[0].config == optimum {
            hits += 1;
        }
    }
    report(
        7,
        "evolutionary correctness",
        hits == 10,
        format!("{hits}/10 runs found the optimum among {} feasible configs", feasible.len()),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_per_step_cost() {
    let _g = serial();
    let space = desk();
    let data = TrainRecipe::desk().dataset.load().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let idx: Vec<usize> = (0..128).collect();
    let batch = data.train.gather(&idx);
    let spec = OptimizerSpec::sgd(0.01);

    let mut time = |parallel: bool| -> f64 {
        let mut handle = SupernetHandle::<f32>::new(space.clone(), &mut ChaCha8Rng::seed_from_u64(1));
        let mut opt = Sgd::new(&spec);
        let mut step = |it: u64, rng: &mut ChaCha8Rng| {
            if parallel {
                handle
                    .train_step(&mut opt, 0.01, &batch.images, &batch.labels, 4, PartitionPolicy::LargestPlusRandom, it, rng)
                    .unwrap();
            } else {
                handle
                    .serial_train_step(&mut opt, 0.01, &batch.images, &batch.labels, 4, PartitionPolicy::LargestPlusRandom, it, rng)
                    .unwrap();
            }
        };
        for it in 0..10 {
            step(it, &mut rng);
        }
        let start = Instant::now();
        for it in 0..100 {
            step(10 + it, &mut rng);
        }
        start.elapsed().as_secs_f64() / 100.0
    };
    let par = time(true);
    let ser = time(false);
    let ratio = par / ser;
    report(
        8,
        "per-step cost",
        ratio <= 0.55,
        format!(
            "parallel {:.1} ms vs serial {:.1} ms per step, ratio {ratio:.3} over 100 warm steps",
            par * 1e3,
            ser * 1e3
        ),
    );
}

// ---------------------------------------------------------------- 9-11

struct Trained {
    space: SearchSpace,
    recipe: TrainRecipe,
    data: Dataset<f32>,
    handle: SupernetHandle<f32>,
    records: Vec<LossRecord>,
    calibration: Vec<Tensor<f32>>,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let space = desk();
        let recipe = TrainRecipe::desk();
        let data = recipe.dataset.load().unwrap();
        let run = trainer::train_supernet(&space, &recipe, &data, TrainOptions::default()).unwrap();
        let calibration = trainer::calibration_batches(&data.calibration, 128, 4);
        Trained {
            space,
            recipe,
            data,
            handle: run.handle,
            records: run.records,
            calibration,
        }
    })
}

fn sign(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn kendall_tau_b(a: &[f64], b: &[f64]) -> f64 {
    let (mut concordant, mut discordant, mut ties_a, mut ties_b) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            let da = sign(a[i] - a[j]);
            let db = sign(b[i] - b[j]);
            match (da == 0, db == 0) {
                (true, true) => {}
                (true, false) => ties_a += 1.0,
                (false, true) => ties_b += 1.0,
                _ if da == db => concordant += 1.0,
                _ => discordant += 1.0,
            }
        }
    }
    let denom = ((concordant + discordant + ties_a) * (concordant + discordant + ties_b)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (concordant - discordant) / denom
    }
}

#[test]
fn kendall_oracle_sanity() {
    assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), 1.0);
    assert_eq!(kendall_tau_b(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0);
    assert!((kendall_tau_b(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]) - 4.0 / 6.0).abs() < 1e-12);
}

#[test]
fn criterion_09_ranking_fidelity() {
    let _g = serial();
    let t = trained();
    let space = &t.space;
    let lo = space.flops(&space.smallest_config()).unwrap();
    let hi = space.flops(&space.largest_config()).unwrap();
    let tolerance = 0.02 * hi as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut configs = Vec::new();
    for k in 0..8u64 {
        let target = lo + (hi - lo) * (2 * k + 1) / 16;
        let cfg = prior::sample_uniform_constrained(space, target, tolerance, &mut rng, 200_000)
            .map(|(c, _)| c)
            .unwrap_or_else(|_| space.uniform_config(target));
        configs.push(cfg);
    }
    let mut proxy = Vec::new();
    let mut retrained = Vec::new();
    for cfg in &configs {
        proxy.push(evo::proxy_accuracy(&t.handle, cfg, &t.data.validation, &t.calibration, 256).unwrap());
        retrained.push(trainer::retrain_subnet(space, cfg, &t.recipe, &t.data, None).unwrap().accuracy);
    }
    let tau = kendall_tau_b(&proxy, &retrained);
    let pairs: Vec<String> = proxy
        .iter()
        .zip(&retrained)
        .map(|(p, r)| format!("{p:.3}/{r:.3}"))
        .collect();
    report(
        9,
        "ranking fidelity",
        tau > 0.0,
        format!("Kendall tau {tau:.3}; proxy/retrained {}", pairs.join(" ")),
    );
}

#[test]
fn criterion_10_searched_vs_uniform() {
    let _g = serial();
    let t = trained();
    let space = &t.space;
    let target = space.flops(&space.largest_config()).unwrap() / 2;
    let bucket = prior::default_bucket_width(space);
    let dist = build_distribution(&t.records, space, bucket, Weighting::InverseProxy).unwrap();
    let table = ProxyLossTable::from_records(&t.records).unwrap();
    let ctx = SearchContext {
        space,
        dist: &dist,
        records: &t.records,
        table: Some(&table),
        weighting: Weighting::InverseProxy,
    };
    let mut cfg = EvoConfig::new(target, dist.default_tolerance() as f64);
    cfg.population_size = 16;
    cfg.parent_count = 8;
    cfg.generations = 5;
    let mut ev = SupernetEvaluator::new(&t.handle, &t.data.validation, &t.data.calibration, 128, 4);
    let ranked = evo::search(&ctx, &cfg, &mut ev, None).unwrap();
    let best = ranked[0].config.clone();
    let uniform = space.uniform_config(target);
    let searched = trainer::retrain_subnet(space, &best, &t.recipe, &t.data, None).unwrap().accuracy;
    let baseline = trainer::retrain_subnet(space, &uniform, &t.recipe, &t.data, None).unwrap().accuracy;
    report(
        10,
        "searched vs uniform at 50% FLOPs",
        searched >= baseline - 0.003,
        format!(
            "searched {best} ({} FLOPs) {searched:.4} vs uniform {uniform} ({} FLOPs) {baseline:.4}",
            space.flops(&best).unwrap(),
            space.flops(&uniform).unwrap()
        ),
    );
}

#[test]
fn criterion_11_bn_recalibration_effect() {
    let _g = serial();
    let t = trained();
    let space = &t.space;
    let stale = t.handle.recalibrate_bn(&space.largest_config(), &t.calibration).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut wins = 0;
    let mut pairs = Vec::new();
    for _ in 0..10 {
        let cfg = space.sample_uniform(&mut rng);
        let fresh = evo::proxy_accuracy(&t.handle, &cfg, &t.data.validation, &t.calibration, 256).unwrap();
        let old = evo::accuracy(&stale, &cfg, &t.data.validation, 256).unwrap();
        if fresh >= old {
            wins += 1;
        }
        pairs.push(format!("{fresh:.3}/{old:.3}"));
    }
    report(
        11,
        "BN recalibration effect",
        wins >= 9,
        format!("{wins}/10 subnets recalibrated >= stale; recalibrated/stale {}", pairs.join(" ")),
    );
}
