//! Full-width parameter store and the graph executor.
//!
//! The executor runs a network description in one of three width modes:
//! the plain full network, the full network with per-part channel masks
//! (the parallel-subnets pass), or a physically sliced subnet that reads the
//! leading blocks of the shared weights.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, BnCache, ConvCache, ConvGeom};
use crate::search_space::{ChannelSource, LayerKind, NodeOp, SearchSpace, WidthConfig};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub bn: Option<BnParams<T>>,
}

/// Weights of the full-width network, indexed by searchable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    pub layers: Vec<LayerParams<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T> {
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
    pub gamma: Option<Vec<T>>,
    pub beta: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub layers: Vec<LayerGrads<T>>,
}

/// Which role a trainable buffer plays; the optimizer skips weight decay on
/// everything but weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    BnScale,
    BnShift,
}

/// Full-width weight tensor shape `(out, in, kh, kw)` of a layer.
pub fn weight_shape(space: &SearchSpace, layer: usize) -> [usize; 4] {
    let spec = &space.layers[layer];
    let node = &space.graph.nodes[space.graph.node_of_layer(layer)];
    let full_in = match space.graph.nodes[node.inputs[0]].channels {
        ChannelSource::Fixed(c) => c,
        ChannelSource::Layer(l) => space.layers[l].max_out_channels,
    };
    let in_dim = match spec.kind {
        LayerKind::DepthwiseConv => 1,
        _ => full_in,
    };
    [spec.max_out_channels, in_dim, spec.kernel_h, spec.kernel_w]
}

impl<T: Scalar> ParamStore<T> {
    /// He-normal convolution weights, uniform linear weights, zero biases,
    /// unit BN scale and zero shift.
    pub fn init<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(space.num_layers());
        for (l, spec) in space.layers.iter().enumerate() {
            let shape = weight_shape(space, l);
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let count: usize = shape.iter().product();
            let weight: Vec<T> = match spec.kind {
                LayerKind::Linear => {
                    let bound = 1.0 / fan_in.sqrt();
                    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                    (0..count).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
                }
                _ => {
                    let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
                    (0..count).map(|_| T::from_f64_lossy(dist.sample(rng))).collect()
                }
            };
            let NodeOp::Layer { bn, bias, .. } =
                space.graph.nodes[space.graph.node_of_layer(l)].op
            else {
                unreachable!("layer node")
            };
            let c = spec.max_out_channels;
            layers.push(LayerParams {
                weight,
                bias: bias.then(|| vec![T::zero(); c]),
                bn: bn.then(|| BnParams {
                    gamma: vec![T::one(); c],
                    beta: vec![T::zero(); c],
                    running_mean: vec![T::zero(); c],
                    running_var: vec![T::one(); c],
                }),
            });
        }
        ParamStore { layers }
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients {
            layers: self
                .layers
                .iter()
                .map(|p| LayerGrads {
                    weight: vec![T::zero(); p.weight.len()],
                    bias: p.bias.as_ref().map(|b| vec![T::zero(); b.len()]),
                    gamma: p.bn.as_ref().map(|b| vec![T::zero(); b.gamma.len()]),
                    beta: p.bn.as_ref().map(|b| vec![T::zero(); b.beta.len()]),
                })
                .collect(),
        }
    }

    /// Learnable element count (weights, biases, BN scale and shift).
    pub fn num_trainable(&self) -> usize {
        self.layers
            .iter()
            .map(|p| {
                p.weight.len()
                    + p.bias.as_ref().map_or(0, Vec::len)
                    + p.bn.as_ref().map_or(0, |b| b.gamma.len() + b.beta.len())
            })
            .sum()
    }

    /// Visits every trainable buffer with its gradient, in a fixed order.
    pub fn for_each_trainable_mut(
        &mut self,
        grads: &Gradients<T>,
        mut f: impl FnMut(usize, ParamRole, &mut [T], &[T]),
    ) {
        let mut slot = 0;
        for (p, g) in self.layers.iter_mut().zip(&grads.layers) {
            f(slot, ParamRole::Weight, &mut p.weight, &g.weight);
            slot += 1;
            if let (Some(b), Some(gb)) = (p.bias.as_mut(), g.bias.as_ref()) {
                f(slot, ParamRole::Bias, b, gb);
            }
            slot += 1;
            if let (Some(bn), Some(gg), Some(gb)) = (p.bn.as_mut(), g.gamma.as_ref(), g.beta.as_ref()) {
                f(slot, ParamRole::BnScale, &mut bn.gamma, gg);
                f(slot + 1, ParamRole::BnShift, &mut bn.beta, gb);
            }
            slot += 2;
        }
    }

    /// Flat copy of every trainable value, in visiting order.
    pub fn trainable_values(&self) -> Vec<T> {
        let mut out = Vec::new();
        for p in &self.layers {
            out.extend_from_slice(&p.weight);
            if let Some(b) = &p.bias {
                out.extend_from_slice(b);
            }
            if let Some(bn) = &p.bn {
                out.extend_from_slice(&bn.gamma);
                out.extend_from_slice(&bn.beta);
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::from_f64_lossy(x.as_f64())).collect::<Vec<U>>();
        ParamStore {
            layers: self
                .layers
                .iter()
                .map(|p| LayerParams {
                    weight: c(&p.weight),
                    bias: p.bias.as_ref().map(c),
                    bn: p.bn.as_ref().map(|b| BnParams {
                        gamma: c(&b.gamma),
                        beta: c(&b.beta),
                        running_mean: c(&b.running_mean),
                        running_var: c(&b.running_var),
                    }),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> Gradients<T> {
    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(&g.weight);
            if let Some(b) = &g.bias {
                out.extend_from_slice(b);
            }
            if let (Some(gg), Some(gb)) = (&g.gamma, &g.beta) {
                out.extend_from_slice(gg);
                out.extend_from_slice(gb);
            }
        }
        out
    }
}

/// How channel widths are realized during a pass.
#[derive(Debug, Clone, Copy)]
pub enum Widths<'a> {
    /// Every layer at its maximum width.
    Full,
    /// Full-width tensors; rows of part `i` keep only the first
    /// `parts[i].widths[l]` channels of layer `l`.
    Masked {
        parts: &'a [WidthConfig],
        rows_per_part: usize,
    },
    /// Tensors physically sized to one configuration.
    Sliced(&'a WidthConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BnStats {
    /// Normalize with the current batch's statistics.
    Batch,
    /// Normalize with the stored running statistics.
    Running,
}

/// Pooled per-channel moments of BN inputs across a stream of batches.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    pub layers: Vec<Option<ChannelMoments>>,
}

#[derive(Debug, Clone)]
pub struct ChannelMoments {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl ChannelMoments {
    /// Merges a batch with `count` samples per channel (Chan et al. update).
    fn merge(&mut self, count: f64, mean: &[f64], var: &[f64]) {
        let total = self.count + count;
        for c in 0..self.mean.len() {
            let delta = mean[c] - self.mean[c];
            self.mean[c] += delta * count / total;
            self.m2[c] += var[c] * count + delta * delta * self.count * count / total;
        }
        self.count = total;
    }

    pub fn variance(&self) -> Vec<f64> {
        self.m2.iter().map(|m| m / self.count).collect()
    }
}

impl MomentAccumulator {
    pub fn new(layers: usize) -> Self {
        MomentAccumulator {
            layers: vec![None; layers],
        }
    }

    fn add<T: Scalar>(&mut self, layer: usize, x: &Tensor<T>) {
        let (mean, var) = ops::channel_moments(x);
        let count = (x.rows() * x.plane()) as f64;
        match &mut self.layers[layer] {
            Some(m) => m.merge(count, &mean, &var),
            slot @ None => {
                *slot = Some(ChannelMoments {
                    count,
                    m2: var.iter().map(|v| v * count).collect(),
                    mean,
                })
            }
        }
    }
}

enum Cache<T> {
    None,
    Layer {
        conv: Option<ConvCache<T>>,
        bn: Option<BnCache<T>>,
    },
    MaxPool(Vec<usize>),
}

/// Node outputs of one forward pass plus what backward needs.
pub struct Trace<T> {
    pub outputs: Vec<Tensor<T>>,
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> Trace<T> {
    pub fn logits(&self) -> &Tensor<T> {
        self.outputs.last().expect("non-empty graph")
    }
}

fn geometry(space: &SearchSpace, node: usize) -> ConvGeom {
    let n = &space.graph.nodes[node];
    let NodeOp::Layer {
        layer,
        stride,
        padding,
        ..
    } = n.op
    else {
        unreachable!("geometry of a non-layer node")
    };
    let shape = weight_shape(space, layer);
    ConvGeom {
        full_in: shape[1],
        kh: shape[2],
        kw: shape[3],
        stride,
        padding,
        out_h: n.out_h,
        out_w: n.out_w,
    }
}

fn layer_width(space: &SearchSpace, layer: usize, widths: Widths<'_>) -> usize {
    match widths {
        Widths::Sliced(cfg) => cfg.widths[layer],
        _ => space.layers[layer].max_out_channels,
    }
}

fn apply_masks<T: Scalar>(t: &mut Tensor<T>, layer: usize, widths: Widths<'_>) {
    if let Widths::Masked {
        parts,
        rows_per_part,
    } = widths
    {
        for (i, cfg) in parts.iter().enumerate() {
            ops::mask_rows(
                t,
                i * rows_per_part,
                (i + 1) * rows_per_part,
                cfg.widths[layer],
            );
        }
    }
}

fn check_widths(space: &SearchSpace, x_rows: usize, widths: Widths<'_>) -> Result<()> {
    match widths {
        Widths::Full => Ok(()),
        Widths::Sliced(cfg) => space.validate(cfg),
        Widths::Masked {
            parts,
            rows_per_part,
        } => {
            if parts.len() * rows_per_part != x_rows {
                return Err(Error::Dimension(format!(
                    "{} parts of {rows_per_part} rows do not cover a batch of {x_rows}",
                    parts.len()
                )));
            }
            parts.iter().try_for_each(|c| space.validate(c))
        }
    }
}

/// Runs the network on `x` (shape `(rows, input_channels, H, W)` at the
/// space's reference resolution).
pub fn forward<T: Scalar>(
    space: &SearchSpace,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    widths: Widths<'_>,
    bn_stats: BnStats,
    mut moments: Option<&mut MomentAccumulator>,
) -> Result<Trace<T>> {
    let (rh, rw) = space.reference_resolution;
    let expect = [x.rows(), space.graph.input_channels, rh, rw];
    if x.shape() != expect || x.rows() == 0 {
        return Err(Error::Dimension(format!(
            "input shape {:?} does not match expected {:?}",
            x.shape(),
            expect
        )));
    }
    check_widths(space, x.rows(), widths)?;

    let nodes = &space.graph.nodes;
    let mut outputs: Vec<Tensor<T>> = Vec::with_capacity(nodes.len());
    let mut caches = Vec::with_capacity(nodes.len());
    for (idx, node) in nodes.iter().enumerate() {
        let (out, cache) = match &node.op {
            NodeOp::Input => (x.clone(), Cache::None),
            NodeOp::Layer { layer, bn, relu, .. } => {
                let layer = *layer;
                let p = &params.layers[layer];
                let input = &outputs[node.inputs[0]];
                let g = geometry(space, idx);
                let out_ch = layer_width(space, layer, widths);
                let (mut z, conv_cache) = match space.layers[layer].kind {
                    LayerKind::DepthwiseConv => {
                        if input.channels() != out_ch {
                            return Err(Error::Dimension(format!(
                                "depthwise layer '{}' got {} channels for width {out_ch}",
                                node.name,
                                input.channels()
                            )));
                        }
                        (ops::depthwise_forward(input, &p.weight, &g), None)
                    }
                    _ => {
                        let (z, c) = ops::conv_forward(input, &p.weight, p.bias.as_deref(), out_ch, &g);
                        (z, Some(c))
                    }
                };
                apply_masks(&mut z, layer, widths);
                let mut bn_cache = None;
                if *bn {
                    let bp = p.bn.as_ref().expect("bn params");
                    if let Some(acc) = moments.as_deref_mut() {
                        acc.add(layer, &z);
                    }
                    let running = match bn_stats {
                        BnStats::Batch => None,
                        BnStats::Running => Some((&bp.running_mean[..], &bp.running_var[..])),
                    };
                    let (y, c) = ops::bn_forward(&z, &bp.gamma, &bp.beta, running);
                    z = y;
                    apply_masks(&mut z, layer, widths);
                    bn_cache = Some(c);
                }
                if *relu {
                    ops::relu_in_place(&mut z);
                }
                (
                    z,
                    Cache::Layer {
                        conv: conv_cache,
                        bn: bn_cache,
                    },
                )
            }
            NodeOp::Add { relu } => {
                let mut acc = outputs[node.inputs[0]].clone();
                for &i in &node.inputs[1..] {
                    if outputs[i].shape() != acc.shape() {
                        return Err(Error::Dimension(format!(
                            "add '{}' inputs {:?} vs {:?}",
                            node.name,
                            acc.shape(),
                            outputs[i].shape()
                        )));
                    }
                    acc.add_assign(&outputs[i]);
                }
                if *relu {
                    ops::relu_in_place(&mut acc);
                }
                (acc, Cache::None)
            }
            NodeOp::MaxPool {
                kernel,
                stride,
                padding,
            } => {
                let (y, arg) = ops::max_pool_forward(
                    &outputs[node.inputs[0]],
                    *kernel,
                    *stride,
                    *padding,
                    node.out_h,
                    node.out_w,
                );
                (y, Cache::MaxPool(arg))
            }
            NodeOp::GlobalAvgPool => (
                ops::global_avg_pool_forward(&outputs[node.inputs[0]]),
                Cache::None,
            ),
        };
        outputs.push(out);
        caches.push(cache);
    }
    Ok(Trace { outputs, caches })
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Back-propagates `dlogits` through a trace produced by [`forward`] with
/// the same `widths`, accumulating into `grads`.
pub fn backward<T: Scalar>(
    space: &SearchSpace,
    params: &ParamStore<T>,
    trace: Trace<T>,
    widths: Widths<'_>,
    dlogits: Tensor<T>,
    grads: &mut Gradients<T>,
) {
    let nodes = &space.graph.nodes;
    let Trace { outputs, caches } = trace;
    let mut douts: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
    douts[nodes.len() - 1] = Some(dlogits);

    for (idx, cache) in caches.into_iter().enumerate().rev() {
        let Some(mut g) = douts[idx].take() else {
            continue;
        };
        let node = &nodes[idx];
        match (&node.op, cache) {
            (NodeOp::Input, _) => {}
            (NodeOp::Layer { layer, relu, .. }, Cache::Layer { conv, bn }) => {
                let layer = *layer;
                let p = &params.layers[layer];
                let lg = &mut grads.layers[layer];
                if *relu {
                    ops::relu_backward_in_place(&mut g, &outputs[idx]);
                }
                if let Some(bc) = bn {
                    apply_masks(&mut g, layer, widths);
                    let bp = p.bn.as_ref().expect("bn params");
                    g = ops::bn_backward(
                        &g,
                        &bc,
                        &bp.gamma,
                        lg.gamma.as_mut().expect("bn grads"),
                        lg.beta.as_mut().expect("bn grads"),
                    );
                }
                apply_masks(&mut g, layer, widths);
                let input = node.inputs[0];
                let need_dx = input != 0;
                let geom = geometry(space, idx);
                let dx = match conv {
                    Some(cc) => ops::conv_backward(
                        &g,
                        &cc,
                        &p.weight,
                        &mut lg.weight,
                        lg.bias.as_deref_mut(),
                        &geom,
                        need_dx,
                    ),
                    None => ops::depthwise_backward(
                        &g,
                        &outputs[input],
                        &p.weight,
                        &mut lg.weight,
                        &geom,
                        need_dx,
                    ),
                };
                if let Some(dx) = dx {
                    accumulate(&mut douts[input], dx);
                }
            }
            (NodeOp::Add { relu }, _) => {
                if *relu {
                    ops::relu_backward_in_place(&mut g, &outputs[idx]);
                }
                for &i in &node.inputs {
                    accumulate(&mut douts[i], g.clone());
                }
            }
            (NodeOp::MaxPool { .. }, Cache::MaxPool(arg)) => {
                let input = node.inputs[0];
                let dx = ops::max_pool_backward(&g, &arg, outputs[input].shape());
                accumulate(&mut douts[input], dx);
            }
            (NodeOp::GlobalAvgPool, _) => {
                let input = node.inputs[0];
                let dx = ops::global_avg_pool_backward(&g, outputs[input].shape());
                accumulate(&mut douts[input], dx);
            }
            _ => unreachable!("cache kind matches node kind"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::builtin;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count_matches_cost_model() {
        for name in ["desk", "mobilenetv2"] {
            let space = SearchSpace::from_description(&builtin(name).unwrap()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let p = ParamStore::<f32>::init(&space, &mut rng);
            assert_eq!(
                p.num_trainable() as u64,
                space.params(&space.largest_config()).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn full_and_sliced_largest_agree() {
        let space = SearchSpace::from_description(&builtin("desk").unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ParamStore::<f64>::init(&space, &mut rng);
        let x = Tensor::from_vec(
            [2, 3, 32, 32],
            (0..2 * 3 * 1024).map(|i| ((i * 37 % 101) as f64) / 50.0 - 1.0).collect(),
        )
        .unwrap();
        let largest = space.largest_config();
        let a = forward(&space, &p, &x, Widths::Full, BnStats::Batch, None).unwrap();
        let b = forward(&space, &p, &x, Widths::Sliced(&largest), BnStats::Batch, None).unwrap();
        assert_eq!(a.logits(), b.logits());
    }

    #[test]
    fn wrong_input_shape_is_dimension_error() {
        let space = SearchSpace::from_description(&builtin("desk").unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = ParamStore::<f32>::init(&space, &mut rng);
        let x = Tensor::zeros([2, 3, 16, 16]);
        assert!(matches!(
            forward(&space, &p, &x, Widths::Full, BnStats::Batch, None),
            Err(Error::Dimension(_))
        ));
    }
}
