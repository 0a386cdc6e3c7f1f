#![allow(dead_code)]

use chanprune::arch::{ArchDescription, KernelSize, LayerDescription, NodeKindName};
use chanprune::network::ParamStore;
use chanprune::records::LossRecord;
use chanprune::search_space::{LayerKind, LayerSpec};
use chanprune::{Scalar, SearchSpace, Tensor, WidthConfig};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn layer(name: String, kind: NodeKindName) -> LayerDescription {
    LayerDescription {
        name,
        kind,
        max_out_channels: None,
        kernel: None,
        stride: None,
        padding: None,
        inputs: None,
        coupling_group: None,
        group_count: None,
        bn: None,
        relu: None,
        bias: None,
    }
}

/// A random small network mixing standard and depthwise convolutions,
/// residual additions, pooling and a final linear layer, with random BN,
/// ReLU and bias flags.
pub fn random_arch<R: Rng>(rng: &mut R) -> ArchDescription {
    let k = [2usize, 4][rng.random_range(0..2)];
    let res = [4usize, 6, 8][rng.random_range(0..3)];
    let mut layers: Vec<LayerDescription> = Vec::new();
    let mut spatial = res;
    let mut group_id = 0;
    let mut prev: Option<(String, usize, String)> = None; // name, channels, group
    let blocks = rng.random_range(1..=3);
    for b in 0..blocks {
        let choice = if prev.is_none() { 0 } else { rng.random_range(0..4) };
        match choice {
            // depthwise on the previous layer's channels
            1 => {
                let (pname, pch, pgroup) = prev.clone().unwrap();
                let mut l = layer(format!("dw{b}"), NodeKindName::Dwconv);
                l.max_out_channels = Some(pch);
                l.kernel = Some(KernelSize::Square(3));
                l.inputs = Some(vec![pname]);
                l.coupling_group = Some(pgroup.clone());
                l.bn = Some(rng.random());
                l.relu = Some(rng.random());
                l.bias = Some(rng.random());
                prev = Some((l.name.clone(), pch, pgroup));
                layers.push(l);
            }
            // residual pair: conv, conv, add
            2 => {
                let (pname, _, _) = prev.clone().unwrap();
                let ch = k * rng.random_range(1..=3);
                group_id += 1;
                let g = format!("g{group_id}");
                let mut a = layer(format!("ra{b}"), NodeKindName::Conv);
                a.max_out_channels = Some(ch);
                a.kernel = Some(KernelSize::Square(1));
                a.inputs = Some(vec![pname]);
                a.coupling_group = Some(g.clone());
                a.bn = Some(rng.random());
                let mut c = layer(format!("rb{b}"), NodeKindName::Conv);
                c.max_out_channels = Some(ch);
                c.kernel = Some(KernelSize::Square(3));
                c.coupling_group = Some(g.clone());
                c.relu = Some(false);
                c.bn = Some(rng.random());
                let mut add = layer(format!("radd{b}"), NodeKindName::Add);
                add.inputs = Some(vec![c.name.clone(), a.name.clone()]);
                add.relu = Some(rng.random());
                prev = Some((add.name.clone(), ch, g));
                layers.extend([a, c, add]);
            }
            // max pooling
            3 if spatial >= 4 => {
                let (pname, pch, pgroup) = prev.clone().unwrap();
                let mut l = layer(format!("pool{b}"), NodeKindName::Maxpool);
                l.kernel = Some(KernelSize::Square(2));
                l.stride = Some(2);
                l.padding = Some(0);
                l.inputs = Some(vec![pname]);
                spatial /= 2;
                prev = Some((l.name.clone(), pch, pgroup));
                layers.push(l);
            }
            _ => {
                let ch = k * rng.random_range(1..=4);
                group_id += 1;
                let g = format!("g{group_id}");
                let kernel = [1usize, 3][rng.random_range(0..2)];
                let stride = if spatial >= 6 && rng.random_bool(0.3) { 2 } else { 1 };
                let mut l = layer(format!("c{b}"), NodeKindName::Conv);
                l.max_out_channels = Some(ch);
                l.kernel = Some(KernelSize::Square(kernel));
                l.stride = Some(stride);
                l.coupling_group = Some(g.clone());
                l.bn = Some(rng.random());
                l.relu = Some(rng.random());
                l.bias = Some(rng.random());
                if prev.is_none() {
                    l.inputs = Some(vec!["input".into()]);
                }
                spatial = (spatial + 2 * (kernel / 2) - kernel) / stride + 1;
                prev = Some((l.name.clone(), ch, g));
                layers.push(l);
            }
        }
    }
    match rng.random_range(0..3) {
        0 => {}
        1 => {
            layers.push(layer("gap".into(), NodeKindName::GlobalAvgPool));
            let mut fc = layer("fc".into(), NodeKindName::Linear);
            fc.max_out_channels = Some(k * rng.random_range(1..=3));
            layers.push(fc);
        }
        _ => {
            let mut fc = layer("fc".into(), NodeKindName::Linear);
            fc.max_out_channels = Some(k * rng.random_range(1..=3));
            fc.relu = Some(rng.random());
            layers.push(fc);
        }
    }
    ArchDescription {
        name: "random".into(),
        input_channels: rng.random_range(1..=3),
        reference_resolution: [res, res],
        group_count: k,
        min_keep_ratio: 0.2,
        layers,
    }
}

pub fn normal_vec<T: Scalar, R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<T> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(v * scale)
        })
        .collect()
}

pub fn random_input<T: Scalar, R: Rng>(rng: &mut R, space: &SearchSpace, rows: usize) -> Tensor<T> {
    let (h, w) = space.reference_resolution;
    let c = space.graph.input_channels;
    Tensor::from_vec([rows, c, h, w], normal_vec(rng, rows * c * h * w, 1.0)).unwrap()
}

/// Replaces biases and every BN parameter with random values (positive
/// variances, nonzero shifts).
pub fn randomize_affine<T: Scalar, R: Rng>(params: &mut ParamStore<T>, rng: &mut R) {
    for p in &mut params.layers {
        if let Some(b) = p.bias.as_mut() {
            let n = b.len();
            *b = normal_vec(rng, n, 0.5);
        }
        if let Some(bn) = p.bn.as_mut() {
            let n = bn.gamma.len();
            bn.gamma = (0..n).map(|_| T::from_f64_lossy(rng.random_range(0.5..1.5))).collect();
            bn.beta = normal_vec(rng, n, 0.5);
            bn.running_mean = normal_vec(rng, n, 0.3);
            bn.running_var = (0..n).map(|_| T::from_f64_lossy(rng.random_range(0.5..2.0))).collect();
        }
    }
}

/// A chain of `layers` 1x1 convolutions with `k` groups of `channels / k`.
pub fn chain_space(layers: usize, channels: usize, k: usize, ratio: f64) -> SearchSpace {
    let specs = (0..layers)
        .map(|i| {
            LayerSpec::new(format!("l{i}"), LayerKind::StandardConv, channels, (1, 1), (4, 4), k)
                .unwrap()
        })
        .collect();
    SearchSpace::chain("chain", 3, specs, ratio).unwrap()
}

pub fn record(space: &SearchSpace, iteration: u64, part: usize, widths: WidthConfig, loss: f64, largest: bool) -> LossRecord {
    LossRecord {
        iteration,
        part,
        flops: space.flops(&widths).unwrap(),
        widths,
        raw_loss: loss,
        is_largest: largest,
    }
}

/// Simulated training records: per iteration one largest part and `n - 1`
/// uniform parts whose loss falls with FLOPs and with training progress.
pub fn simulated_records<R: Rng>(space: &SearchSpace, iterations: u64, n: usize, rng: &mut R) -> Vec<LossRecord> {
    let max = space.flops(&space.largest_config()).unwrap() as f64;
    let mut out = Vec::new();
    for t in 0..iterations {
        let progress = 1.0 + 2.0 * (-(t as f64) / (iterations as f64 / 4.0)).exp();
        for part in 0..n {
            let cfg = if part == 0 {
                space.largest_config()
            } else {
                space.sample_uniform(rng)
            };
            let f = space.flops(&cfg).unwrap() as f64 / max;
            let loss = progress * (0.5 + (1.0 - f)) * rng.random_range(0.9..1.1);
            out.push(record(space, t, part, cfg, loss, part == 0));
        }
    }
    out
}
