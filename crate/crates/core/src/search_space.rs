//! Grouped width search space and the MAC/parameter cost model.
//!
//! Every convolution or linear layer has `K` channel groups; a layer's width
//! moves in steps of `C / K` and never drops below `min_keep_ratio * C`.
//! Layers named by the same coupling group always share a width (residual
//! partners, depthwise convolutions and their producers).

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use num_bigint::BigUint;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::arch::{ArchDescription, LayerDescription, NodeKindName, INPUT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    StandardConv,
    DepthwiseConv,
    Linear,
}

/// One searchable layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub max_out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub coupling_group: Option<String>,
    pub group_count: usize,
}

impl LayerSpec {
    pub fn new(
        name: impl Into<String>,
        kind: LayerKind,
        max_out_channels: usize,
        kernel: (usize, usize),
        out: (usize, usize),
        group_count: usize,
    ) -> Result<Self> {
        let spec = LayerSpec {
            name: name.into(),
            kind,
            max_out_channels,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            out_h: out.0,
            out_w: out.1,
            coupling_group: None,
            group_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_coupling(mut self, group: impl Into<String>) -> Self {
        self.coupling_group = Some(group.into());
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Architecture(format!("layer '{}': {msg}", self.name)));
        if self.max_out_channels == 0 || self.group_count == 0 {
            return bad("channel and group counts must be positive".into());
        }
        if self.max_out_channels % self.group_count != 0 {
            return bad(format!(
                "{} channels are not divisible into {} groups",
                self.max_out_channels, self.group_count
            ));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.out_h == 0 || self.out_w == 0 {
            return bad("kernel and output sizes must be at least 1".into());
        }
        Ok(())
    }

    /// Width of one channel group.
    pub fn step(&self) -> usize {
        self.max_out_channels / self.group_count
    }
}

/// Where a node's channel count comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelSource {
    Fixed(usize),
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeOp {
    Input,
    Layer {
        layer: usize,
        stride: usize,
        padding: usize,
        bn: bool,
        relu: bool,
        bias: bool,
    },
    Add {
        relu: bool,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    GlobalAvgPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: NodeOp,
    pub inputs: Vec<usize>,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub channels: ChannelSource,
}

/// Network graph in topological order; node 0 is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub input_channels: usize,
    pub nodes: Vec<Node>,
}

impl Graph {
    pub fn output(&self) -> usize {
        self.nodes.len() - 1
    }

    /// Index of the graph node that owns searchable layer `layer`.
    pub fn node_of_layer(&self, layer: usize) -> usize {
        self.nodes
            .iter()
            .position(|n| matches!(n.op, NodeOp::Layer { layer: l, .. } if l == layer))
            .expect("every layer has a node")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchSpace {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub min_keep_ratio: f64,
    pub reference_resolution: (usize, usize),
    pub graph: Graph,
    /// Layer indices of each independent degree of freedom.
    dofs: Vec<Vec<usize>>,
    layer_dof: Vec<usize>,
    choices: Vec<Vec<usize>>,
}

/// One width per searchable layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct WidthConfig {
    pub widths: Vec<usize>,
}

impl WidthConfig {
    pub fn new(widths: Vec<usize>) -> Self {
        WidthConfig { widths }
    }

    pub fn len(&self) -> usize {
        self.widths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.widths.is_empty()
    }
}

impl fmt::Display for WidthConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.widths.iter().map(|w| w.to_string()).collect();
        write!(f, "{}", parts.join("-"))
    }
}

impl std::str::FromStr for WidthConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let widths = s
            .split(|c: char| c == ',' || c == '-' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<usize>()
                    .map_err(|_| Error::Config(format!("invalid width '{t}' in '{s}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WidthConfig { widths })
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl SearchSpace {
    pub fn from_description(desc: &ArchDescription) -> Result<Self> {
        let arch_err = |m: String| Error::Architecture(m);
        if !(0.0..=1.0).contains(&desc.min_keep_ratio) {
            return Err(arch_err(format!(
                "min_keep_ratio {} outside [0, 1]",
                desc.min_keep_ratio
            )));
        }
        let (res_h, res_w) = (desc.reference_resolution[0], desc.reference_resolution[1]);
        if res_h == 0 || res_w == 0 || desc.input_channels == 0 {
            return Err(arch_err("resolution and input channels must be positive".into()));
        }
        if desc.layers.is_empty() {
            return Err(arch_err("no layers".into()));
        }

        let mut nodes = vec![Node {
            name: INPUT.to_string(),
            op: NodeOp::Input,
            inputs: vec![],
            in_h: res_h,
            in_w: res_w,
            out_h: res_h,
            out_w: res_w,
            channels: ChannelSource::Fixed(desc.input_channels),
        }];
        let mut by_name: HashMap<&str, usize> = HashMap::from([(INPUT, 0)]);
        let mut layers = Vec::new();

        for ld in &desc.layers {
            if by_name.contains_key(ld.name.as_str()) {
                return Err(arch_err(format!("duplicate layer name '{}'", ld.name)));
            }
            let inputs: Vec<usize> = match &ld.inputs {
                Some(names) => names
                    .iter()
                    .map(|n| {
                        by_name.get(n.as_str()).copied().ok_or_else(|| {
                            arch_err(format!("layer '{}' references unknown input '{n}'", ld.name))
                        })
                    })
                    .collect::<Result<_>>()?,
                None => vec![nodes.len() - 1],
            };
            let node = build_node(desc, ld, &inputs, &nodes, &mut layers)?;
            by_name.insert(ld.name.as_str(), nodes.len());
            nodes.push(node);
        }

        let graph = Graph {
            input_channels: desc.input_channels,
            nodes,
        };
        Self::assemble(
            desc.name.clone(),
            layers,
            desc.min_keep_ratio,
            (res_h, res_w),
            graph,
        )
    }

    /// A plain chain of layers (each consuming the previous one), useful for
    /// synthetic spaces where only the cost model matters.
    pub fn chain(
        name: impl Into<String>,
        input_channels: usize,
        layers: Vec<LayerSpec>,
        min_keep_ratio: f64,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Architecture("no layers".into()));
        }
        for l in &layers {
            l.validate()?;
        }
        let mut nodes = vec![Node {
            name: INPUT.to_string(),
            op: NodeOp::Input,
            inputs: vec![],
            in_h: layers[0].out_h,
            in_w: layers[0].out_w,
            out_h: layers[0].out_h,
            out_w: layers[0].out_w,
            channels: ChannelSource::Fixed(input_channels),
        }];
        for (i, l) in layers.iter().enumerate() {
            let prev = &nodes[i];
            nodes.push(Node {
                name: l.name.clone(),
                op: NodeOp::Layer {
                    layer: i,
                    stride: 1,
                    padding: l.kernel_h / 2,
                    bn: false,
                    relu: false,
                    bias: false,
                },
                inputs: vec![i],
                in_h: prev.out_h,
                in_w: prev.out_w,
                out_h: l.out_h,
                out_w: l.out_w,
                channels: ChannelSource::Layer(i),
            });
        }
        let res = (layers[0].out_h, layers[0].out_w);
        let graph = Graph {
            input_channels,
            nodes,
        };
        Self::assemble(name.into(), layers, min_keep_ratio, res, graph)
    }

    fn assemble(
        name: String,
        layers: Vec<LayerSpec>,
        min_keep_ratio: f64,
        reference_resolution: (usize, usize),
        graph: Graph,
    ) -> Result<Self> {
        let mut dofs: Vec<Vec<usize>> = Vec::new();
        let mut layer_dof = vec![0; layers.len()];
        let mut group_dof: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, l) in layers.iter().enumerate() {
            match l.coupling_group.as_deref() {
                Some(g) => match group_dof.get(g) {
                    Some(&d) => {
                        let first = &layers[dofs[d][0]];
                        if first.max_out_channels != l.max_out_channels
                            || first.group_count != l.group_count
                        {
                            return Err(Error::Architecture(format!(
                                "coupling group '{g}' mixes layers '{}' ({}ch/{}g) and '{}' ({}ch/{}g)",
                                first.name,
                                first.max_out_channels,
                                first.group_count,
                                l.name,
                                l.max_out_channels,
                                l.group_count
                            )));
                        }
                        dofs[d].push(i);
                        layer_dof[i] = d;
                    }
                    None => {
                        group_dof.insert(g, dofs.len());
                        layer_dof[i] = dofs.len();
                        dofs.push(vec![i]);
                    }
                },
                None => {
                    layer_dof[i] = dofs.len();
                    dofs.push(vec![i]);
                }
            }
        }

        let choices = layers
            .iter()
            .map(|l| choice_grid(l, min_keep_ratio))
            .collect::<Vec<_>>();

        let space = SearchSpace {
            name,
            layers,
            min_keep_ratio,
            reference_resolution,
            graph,
            dofs,
            layer_dof,
            choices,
        };
        space.check_channel_consistency()?;
        Ok(space)
    }

    /// Depthwise layers and residual sums need equal widths on every config;
    /// reject graphs whose coupling groups do not guarantee that.
    fn check_channel_consistency(&self) -> Result<()> {
        let same = |a: ChannelSource, b: ChannelSource| match (a, b) {
            (ChannelSource::Fixed(x), ChannelSource::Fixed(y)) => x == y,
            (ChannelSource::Layer(x), ChannelSource::Layer(y)) => {
                self.layer_dof[x] == self.layer_dof[y]
            }
            (ChannelSource::Fixed(c), ChannelSource::Layer(l))
            | (ChannelSource::Layer(l), ChannelSource::Fixed(c)) => {
                self.choices[l].len() == 1 && self.choices[l][0] == c
            }
        };
        for node in &self.graph.nodes {
            match &node.op {
                NodeOp::Add { .. } => {
                    let first = self.graph.nodes[node.inputs[0]].channels;
                    for &i in &node.inputs[1..] {
                        if !same(first, self.graph.nodes[i].channels) {
                            return Err(Error::Architecture(format!(
                                "inputs of '{}' are not width-coupled; put their producers in one coupling group",
                                node.name
                            )));
                        }
                    }
                }
                NodeOp::Layer { layer, .. }
                    if self.layers[*layer].kind == LayerKind::DepthwiseConv =>
                {
                    let input = self.graph.nodes[node.inputs[0]].channels;
                    if self.max_channels(input) != self.layers[*layer].max_out_channels
                        || !same(input, ChannelSource::Layer(*layer))
                    {
                        return Err(Error::Architecture(format!(
                            "depthwise layer '{}' must share a coupling group with its input",
                            node.name
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn max_channels(&self, src: ChannelSource) -> usize {
        match src {
            ChannelSource::Fixed(c) => c,
            ChannelSource::Layer(l) => self.layers[l].max_out_channels,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Independent degrees of freedom, each listing its coupled layers.
    pub fn degrees_of_freedom(&self) -> &[Vec<usize>] {
        &self.dofs
    }

    pub fn dof_of_layer(&self, layer: usize) -> usize {
        self.layer_dof[layer]
    }

    pub fn allowed_choices(&self, layer_index: usize) -> Result<&[usize]> {
        self.choices
            .get(layer_index)
            .map(Vec::as_slice)
            .ok_or(Error::Index {
                index: layer_index,
                len: self.layers.len(),
            })
    }

    pub(crate) fn choices_of(&self, layer: usize) -> &[usize] {
        &self.choices[layer]
    }

    /// Number of distinct width configurations.
    pub fn space_size(&self) -> BigUint {
        self.dofs
            .iter()
            .map(|d| BigUint::from(self.choices[d[0]].len()))
            .product()
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> WidthConfig {
        let mut widths = vec![0; self.layers.len()];
        for dof in &self.dofs {
            let choices = &self.choices[dof[0]];
            let w = choices[rng.random_range(0..choices.len())];
            for &l in dof {
                widths[l] = w;
            }
        }
        WidthConfig { widths }
    }

    pub fn largest_config(&self) -> WidthConfig {
        WidthConfig {
            widths: self.layers.iter().map(|l| l.max_out_channels).collect(),
        }
    }

    pub fn smallest_config(&self) -> WidthConfig {
        WidthConfig {
            widths: self.choices.iter().map(|c| c[0]).collect(),
        }
    }

    /// Builds a config from one choice index per degree of freedom.
    pub fn config_from_dof_indices(&self, indices: &[usize]) -> WidthConfig {
        let mut widths = vec![0; self.layers.len()];
        for (dof, &idx) in self.dofs.iter().zip(indices) {
            let w = self.choices[dof[0]][idx];
            for &l in dof {
                widths[l] = w;
            }
        }
        WidthConfig { widths }
    }

    /// Every configuration in the space, in lexicographic order of the
    /// degrees of freedom. Intended for small spaces only.
    pub fn enumerate(&self) -> impl Iterator<Item = WidthConfig> + '_ {
        let sizes: Vec<usize> = self.dofs.iter().map(|d| self.choices[d[0]].len()).collect();
        let mut idx = vec![0usize; sizes.len()];
        let mut done = false;
        std::iter::from_fn(move || {
            if done {
                return None;
            }
            let cfg = self.config_from_dof_indices(&idx);
            done = true;
            for i in (0..idx.len()).rev() {
                idx[i] += 1;
                if idx[i] < sizes[i] {
                    done = false;
                    break;
                }
                idx[i] = 0;
            }
            Some(cfg)
        })
    }

    pub fn validate(&self, config: &WidthConfig) -> Result<()> {
        if config.widths.len() != self.layers.len() {
            return Err(Error::Constraint(format!(
                "config has {} widths, space has {} layers",
                config.widths.len(),
                self.layers.len()
            )));
        }
        for (l, &w) in config.widths.iter().enumerate() {
            if self.choices[l].binary_search(&w).is_err() {
                return Err(Error::Constraint(format!(
                    "width {w} not allowed for layer '{}' (choices {:?})",
                    self.layers[l].name, self.choices[l]
                )));
            }
        }
        for dof in &self.dofs {
            let w = config.widths[dof[0]];
            if let Some(&l) = dof.iter().find(|&&l| config.widths[l] != w) {
                return Err(Error::Constraint(format!(
                    "coupled layers '{}' and '{}' have different widths",
                    self.layers[dof[0]].name, self.layers[l].name
                )));
            }
        }
        Ok(())
    }

    /// Channel count of a node's output under `config`.
    pub fn node_channels(&self, node: usize, config: &WidthConfig) -> usize {
        match self.graph.nodes[node].channels {
            ChannelSource::Fixed(c) => c,
            ChannelSource::Layer(l) => config.widths[l],
        }
    }

    /// Input channel count seen by searchable layer `layer`.
    pub fn layer_in_channels(&self, layer: usize, config: &WidthConfig) -> usize {
        let node = self.graph.node_of_layer(layer);
        self.node_channels(self.graph.nodes[node].inputs[0], config)
    }

    /// Multiply-accumulate count over convolution and linear layers.
    pub fn flops(&self, config: &WidthConfig) -> Result<u64> {
        self.validate(config)?;
        Ok(self.flops_unchecked(config))
    }

    pub(crate) fn flops_unchecked(&self, config: &WidthConfig) -> u64 {
        let mut total = 0u64;
        for node in &self.graph.nodes {
            if let NodeOp::Layer { layer, .. } = node.op {
                let spec = &self.layers[layer];
                let out = config.widths[layer] as u64;
                let inp = self.node_channels(node.inputs[0], config) as u64;
                let k = (spec.kernel_h * spec.kernel_w) as u64;
                let spatial = (spec.out_h * spec.out_w) as u64;
                total += match spec.kind {
                    LayerKind::StandardConv | LayerKind::Linear => inp * out * k * spatial,
                    LayerKind::DepthwiseConv => out * k * spatial,
                };
            }
        }
        total
    }

    /// Learnable parameter count: weights, biases and BN affine terms.
    pub fn params(&self, config: &WidthConfig) -> Result<u64> {
        self.validate(config)?;
        let mut total = 0u64;
        for node in &self.graph.nodes {
            if let NodeOp::Layer { layer, bn, bias, .. } = node.op {
                let spec = &self.layers[layer];
                let out = config.widths[layer] as u64;
                let inp = self.node_channels(node.inputs[0], config) as u64;
                let k = (spec.kernel_h * spec.kernel_w) as u64;
                total += match spec.kind {
                    LayerKind::StandardConv | LayerKind::Linear => inp * out * k,
                    LayerKind::DepthwiseConv => out * k,
                };
                if bias {
                    total += out;
                }
                if bn {
                    total += 2 * out;
                }
            }
        }
        Ok(total)
    }

    /// The space restricted to a single configuration: every layer's maximum
    /// becomes its width in `config` and no choices remain. Used to build
    /// physically pruned networks for retraining.
    pub fn sliced(&self, config: &WidthConfig) -> Result<SearchSpace> {
        self.validate(config)?;
        let layers: Vec<LayerSpec> = self
            .layers
            .iter()
            .zip(&config.widths)
            .map(|(l, &w)| LayerSpec {
                max_out_channels: w,
                group_count: 1,
                ..l.clone()
            })
            .collect();
        Self::assemble(
            format!("{}@{}", self.name, config),
            layers,
            1.0,
            self.reference_resolution,
            self.graph.clone(),
        )
    }

    /// Width configuration scaling every layer by one common factor, snapped
    /// to the choice grid, whose FLOPs are closest to `target_flops`.
    pub fn uniform_config(&self, target_flops: u64) -> WidthConfig {
        let snap = |ratio: f64| -> WidthConfig {
            let mut widths = vec![0; self.layers.len()];
            for dof in &self.dofs {
                let l = &self.layers[dof[0]];
                let want = ratio * l.max_out_channels as f64;
                let choices = &self.choices[dof[0]];
                let w = *choices
                    .iter()
                    .min_by(|a, b| {
                        let da = (**a as f64 - want).abs();
                        let db = (**b as f64 - want).abs();
                        da.partial_cmp(&db).unwrap().then(b.cmp(a))
                    })
                    .unwrap();
                for &i in dof {
                    widths[i] = w;
                }
            }
            WidthConfig { widths }
        };
        let mut best = self.largest_config();
        let mut best_gap = self.flops_unchecked(&best).abs_diff(target_flops);
        for step in 0..=1000 {
            let cfg = snap(step as f64 / 1000.0);
            let gap = self.flops_unchecked(&cfg).abs_diff(target_flops);
            if gap < best_gap {
                best = cfg;
                best_gap = gap;
            }
        }
        best
    }

    /// Stable content hash of the space (layers, graph and choices).
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.name.as_bytes());
        h.update(format!("{:?}", self.layers).as_bytes());
        h.update(format!("{:?}", self.graph).as_bytes());
        h.update(format!("{:?}", self.choices).as_bytes());
        hex::encode(h.finalize())
    }
}

fn choice_grid(layer: &LayerSpec, min_keep_ratio: f64) -> Vec<usize> {
    let c = layer.max_out_channels;
    let step = layer.step();
    // Guard against 0.2 * 20 = 4.000000000000001 style rounding.
    let floor = (min_keep_ratio * c as f64 - 1e-9).ceil().max(0.0) as usize;
    (1..=layer.group_count)
        .map(|m| m * step)
        .filter(|&w| w >= floor)
        .collect()
}

fn build_node(
    desc: &ArchDescription,
    ld: &LayerDescription,
    inputs: &[usize],
    nodes: &[Node],
    layers: &mut Vec<LayerSpec>,
) -> Result<Node> {
    let arch_err = |m: String| Error::Architecture(format!("layer '{}': {m}", ld.name));
    if inputs.is_empty() {
        return Err(arch_err("no inputs".into()));
    }
    let first = &nodes[inputs[0]];
    let (in_h, in_w) = (first.out_h, first.out_w);
    let single_input = || {
        if inputs.len() != 1 {
            Err(arch_err(format!("expects exactly one input, got {}", inputs.len())))
        } else {
            Ok(())
        }
    };
    let searchable_only = |field: bool, what: &str| {
        if field {
            Err(arch_err(format!("'{what}' is only valid on conv, dwconv and linear layers")))
        } else {
            Ok(())
        }
    };

    let mut node = Node {
        name: ld.name.clone(),
        op: NodeOp::GlobalAvgPool,
        inputs: inputs.to_vec(),
        in_h,
        in_w,
        out_h: in_h,
        out_w: in_w,
        channels: first.channels,
    };

    match ld.kind {
        NodeKindName::Conv | NodeKindName::Dwconv | NodeKindName::Linear => {
            single_input()?;
            let max_out = ld
                .max_out_channels
                .ok_or_else(|| arch_err("missing max_out_channels".into()))?;
            let is_linear = ld.kind == NodeKindName::Linear;
            let (kh, kw, stride, padding) = if is_linear {
                if ld.kernel.is_some() || ld.stride.is_some() || ld.padding.is_some() {
                    return Err(arch_err("linear layers take no kernel/stride/padding".into()));
                }
                (in_h, in_w, 1, 0)
            } else {
                let (kh, kw) = ld.kernel.map(|k| k.dims()).unwrap_or((1, 1));
                let stride = ld.stride.unwrap_or(1);
                let padding = ld.padding.unwrap_or(kh.max(kw) / 2);
                (kh, kw, stride, padding)
            };
            let out_h = conv_out(in_h, kh, stride, padding)
                .ok_or_else(|| arch_err(format!("kernel {kh}x{kw} does not fit input {in_h}x{in_w}")))?;
            let out_w = conv_out(in_w, kw, stride, padding)
                .ok_or_else(|| arch_err(format!("kernel {kh}x{kw} does not fit input {in_h}x{in_w}")))?;
            let kind = match ld.kind {
                NodeKindName::Conv => LayerKind::StandardConv,
                NodeKindName::Dwconv => LayerKind::DepthwiseConv,
                _ => LayerKind::Linear,
            };
            let mut spec = LayerSpec::new(
                ld.name.clone(),
                kind,
                max_out,
                (kh, kw),
                (out_h, out_w),
                ld.group_count.unwrap_or(desc.group_count),
            )?;
            spec.coupling_group = ld.coupling_group.clone();
            let index = layers.len();
            layers.push(spec);
            node.op = NodeOp::Layer {
                layer: index,
                stride,
                padding,
                bn: ld.bn.unwrap_or(!is_linear),
                relu: ld.relu.unwrap_or(!is_linear),
                bias: ld.bias.unwrap_or(is_linear),
            };
            node.out_h = out_h;
            node.out_w = out_w;
            node.channels = ChannelSource::Layer(index);
        }
        NodeKindName::Add => {
            searchable_only(
                ld.max_out_channels.is_some()
                    || ld.coupling_group.is_some()
                    || ld.group_count.is_some()
                    || ld.bn.is_some()
                    || ld.bias.is_some(),
                "max_out_channels/coupling_group/group_count/bn/bias",
            )?;
            if inputs.len() < 2 {
                return Err(arch_err("add needs at least two inputs".into()));
            }
            for &i in inputs {
                if (nodes[i].out_h, nodes[i].out_w) != (in_h, in_w) {
                    return Err(arch_err("add inputs have different spatial sizes".into()));
                }
            }
            node.op = NodeOp::Add {
                relu: ld.relu.unwrap_or(false),
            };
        }
        NodeKindName::Maxpool => {
            single_input()?;
            searchable_only(ld.max_out_channels.is_some(), "max_out_channels")?;
            let (k, _) = ld.kernel.map(|k| k.dims()).unwrap_or((2, 2));
            let stride = ld.stride.unwrap_or(k);
            let padding = ld.padding.unwrap_or(0);
            node.out_h = conv_out(in_h, k, stride, padding)
                .ok_or_else(|| arch_err("pool window does not fit".into()))?;
            node.out_w = conv_out(in_w, k, stride, padding)
                .ok_or_else(|| arch_err("pool window does not fit".into()))?;
            node.op = NodeOp::MaxPool {
                kernel: k,
                stride,
                padding,
            };
        }
        NodeKindName::GlobalAvgPool => {
            single_input()?;
            searchable_only(ld.max_out_channels.is_some(), "max_out_channels")?;
            node.out_h = 1;
            node.out_w = 1;
            node.op = NodeOp::GlobalAvgPool;
        }
    }
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::builtin;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single(c: usize, k: usize, ratio: f64) -> SearchSpace {
        let l = LayerSpec::new("l", LayerKind::StandardConv, c, (3, 3), (8, 8), k).unwrap();
        SearchSpace::chain("t", 3, vec![l], ratio).unwrap()
    }

    fn independent(n: usize, c: usize, k: usize) -> SearchSpace {
        let layers = (0..n)
            .map(|i| {
                LayerSpec::new(format!("l{i}"), LayerKind::StandardConv, c, (1, 1), (1, 1), k)
                    .unwrap()
            })
            .collect();
        SearchSpace::chain("t", 1, layers, 0.0).unwrap()
    }

    #[test]
    fn choices_respect_keep_floor() {
        assert_eq!(
            single(64, 8, 0.2).allowed_choices(0).unwrap(),
            &[16, 24, 32, 40, 48, 56, 64]
        );
        assert_eq!(
            single(20, 20, 0.2).allowed_choices(0).unwrap(),
            &(4..=20).collect::<Vec<_>>()[..]
        );
        assert_eq!(
            single(64, 8, 0.0).allowed_choices(0).unwrap(),
            &[8, 16, 24, 32, 40, 48, 56, 64]
        );
    }

    #[test]
    fn choices_out_of_range_is_index_error() {
        let s = single(64, 8, 0.2);
        assert!(matches!(
            s.allowed_choices(1),
            Err(Error::Index { index: 1, len: 1 })
        ));
    }

    #[test]
    fn indivisible_channels_rejected() {
        let err = LayerSpec::new("x", LayerKind::StandardConv, 30, (3, 3), (4, 4), 8).unwrap_err();
        assert!(matches!(err, Error::Architecture(_)));
    }

    #[test]
    fn space_sizes() {
        assert_eq!(independent(3, 10, 10).space_size(), BigUint::from(1000u32));
        let coupled = vec![
            LayerSpec::new("a", LayerKind::StandardConv, 5, (1, 1), (1, 1), 5)
                .unwrap()
                .with_coupling("g"),
            LayerSpec::new("b", LayerKind::StandardConv, 5, (1, 1), (1, 1), 5)
                .unwrap()
                .with_coupling("g"),
        ];
        let s = SearchSpace::chain("c", 1, coupled, 0.0).unwrap();
        assert_eq!(s.space_size(), BigUint::from(5u32));
    }

    #[test]
    fn single_conv_flops() {
        let l = LayerSpec::new("c", LayerKind::StandardConv, 16, (3, 3), (32, 32), 1).unwrap();
        let s = SearchSpace::chain("c", 3, vec![l], 1.0).unwrap();
        assert_eq!(s.flops(&s.largest_config()).unwrap(), 442_368);
        assert_eq!(s.params(&s.largest_config()).unwrap(), 3 * 16 * 9);
    }

    #[test]
    fn one_choice_space_samples_largest() {
        let l = LayerSpec::new("c", LayerKind::StandardConv, 16, (3, 3), (4, 4), 1).unwrap();
        let s = SearchSpace::chain("c", 3, vec![l.clone(), l], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(s.sample_uniform(&mut rng), s.largest_config());
    }

    #[test]
    fn invalid_config_is_constraint_error() {
        let s = single(64, 8, 0.2);
        assert!(matches!(
            s.flops(&WidthConfig::new(vec![8])),
            Err(Error::Constraint(_))
        ));
        assert!(matches!(
            s.flops(&WidthConfig::new(vec![64, 64])),
            Err(Error::Constraint(_))
        ));
    }

    #[test]
    fn coupled_widths_must_match() {
        let s = SearchSpace::from_description(&builtin("desk").unwrap()).unwrap();
        let mut cfg = s.largest_config();
        cfg.widths[0] = s.allowed_choices(0).unwrap()[0];
        assert!(matches!(s.validate(&cfg), Err(Error::Constraint(_))));
    }

    #[test]
    fn uncoupled_residual_rejected() {
        let text = r#"
            name = "bad"
            input_channels = 3
            reference_resolution = [8, 8]
            group_count = 4
            [[layers]]
            name = "a"
            kind = "conv"
            max_out_channels = 8
            kernel = 3
            [[layers]]
            name = "b"
            kind = "conv"
            max_out_channels = 8
            kernel = 3
            [[layers]]
            name = "sum"
            kind = "add"
            inputs = ["a", "b"]
        "#;
        let desc = ArchDescription::from_toml_str(text).unwrap();
        assert!(matches!(
            SearchSpace::from_description(&desc),
            Err(Error::Architecture(_))
        ));
    }

    #[test]
    fn unknown_input_rejected() {
        let text = r#"
            name = "bad"
            input_channels = 3
            reference_resolution = [8, 8]
            group_count = 4
            [[layers]]
            name = "a"
            kind = "conv"
            max_out_channels = 8
            inputs = ["nope"]
        "#;
        let desc = ArchDescription::from_toml_str(text).unwrap();
        assert!(SearchSpace::from_description(&desc).is_err());
    }

    #[test]
    fn sliced_space_has_single_config_with_same_cost() {
        let s = SearchSpace::from_description(&builtin("desk").unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = s.sample_uniform(&mut rng);
        let sliced = s.sliced(&cfg).unwrap();
        assert_eq!(sliced.space_size(), BigUint::from(1u32));
        assert_eq!(sliced.largest_config(), cfg);
        assert_eq!(sliced.flops(&cfg).unwrap(), s.flops(&cfg).unwrap());
        assert_eq!(sliced.params(&cfg).unwrap(), s.params(&cfg).unwrap());
    }

    #[test]
    fn uniform_config_tracks_target() {
        let s = SearchSpace::from_description(&builtin("desk").unwrap()).unwrap();
        let full = s.flops(&s.largest_config()).unwrap();
        let half = s.uniform_config(full / 2);
        let f = s.flops(&half).unwrap();
        assert!(f < full);
        assert!((f as f64 / full as f64 - 0.5).abs() < 0.1, "{f} vs {full}");
    }

    #[test]
    fn width_config_parses_and_displays() {
        let c: WidthConfig = "16,24, 32".parse().unwrap();
        assert_eq!(c.widths, vec![16, 24, 32]);
        assert_eq!(c.to_string(), "16-24-32");
        assert_eq!(c.to_string().parse::<WidthConfig>().unwrap(), c);
        assert!("16,x".parse::<WidthConfig>().is_err());
    }
}
