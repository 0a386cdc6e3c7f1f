//! Architecture description files.
//!
//! A description is a TOML document listing the network's layers in
//! topological order together with the search-space parameters:
//!
//! ```toml
//! name = "tiny"
//! input_channels = 3
//! reference_resolution = [32, 32]
//! group_count = 8
//! min_keep_ratio = 0.2
//!
//! [[layers]]
//! name = "stem"
//! kind = "conv"
//! max_out_channels = 16
//! kernel = 3
//! stride = 1
//! inputs = ["input"]
//! coupling_group = "trunk"
//! ```
//!
//! Layer kinds are `conv`, `dwconv`, `linear`, `add`, `maxpool` and
//! `global_avg_pool`. Only `conv`, `dwconv` and `linear` carry a searchable
//! width. `inputs` defaults to the previous layer (or the image for the first
//! layer). A `linear` layer consumes its whole input feature map, so it is
//! equivalent to flatten followed by a dense layer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name reserved for the network input in `inputs` lists.
pub const INPUT: &str = "input";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDescription {
    pub name: String,
    pub input_channels: usize,
    pub reference_resolution: [usize; 2],
    /// Default number of channel groups per layer.
    pub group_count: usize,
    #[serde(default = "default_min_keep_ratio")]
    pub min_keep_ratio: f64,
    pub layers: Vec<LayerDescription>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKindName {
    Conv,
    Dwconv,
    Linear,
    Add,
    Maxpool,
    GlobalAvgPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KernelSize {
    Square(usize),
    Rect([usize; 2]),
}

impl KernelSize {
    pub fn dims(self) -> (usize, usize) {
        match self {
            KernelSize::Square(k) => (k, k),
            KernelSize::Rect([h, w]) => (h, w),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDescription {
    pub name: String,
    pub kind: NodeKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    /// Zero padding; defaults to `kernel / 2`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coupling_group: Option<String>,
    /// Per-layer override of the description's `group_count`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_count: Option<usize>,
    /// Batch normalization after the layer; defaults to true for convolutions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bn: Option<bool>,
    /// ReLU after the layer (after BN); defaults to true for convolutions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relu: Option<bool>,
    /// Additive bias; defaults to true for linear layers only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<bool>,
}

fn default_min_keep_ratio() -> f64 {
    0.2
}

impl ArchDescription {
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if let Some(name) = path.to_str().and_then(|p| p.strip_prefix("builtin:")) {
            return builtin(name);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|m| Error::parse(path, m))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("architecture descriptions always serialize")
    }
}

/// Names of the bundled descriptions, loadable as `builtin:<name>`.
pub const BUILTIN_NAMES: &[&str] = &["resnet50", "mobilenetv2", "vgg16", "desk"];

pub fn builtin(name: &str) -> Result<ArchDescription> {
    let text = match name {
        "resnet50" => include_str!("../assets/resnet50.toml"),
        "mobilenetv2" => include_str!("../assets/mobilenetv2.toml"),
        "vgg16" => include_str!("../assets/vgg16.toml"),
        "desk" => include_str!("../assets/desk.toml"),
        other => {
            return Err(Error::Config(format!(
                "unknown builtin architecture '{other}' (available: {})",
                BUILTIN_NAMES.join(", ")
            )))
        }
    };
    ArchDescription::from_toml_str(text)
        .map_err(|m| Error::parse(format!("builtin:{name}"), m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for name in BUILTIN_NAMES {
            let desc = builtin(name).unwrap();
            assert!(!desc.layers.is_empty(), "{name}");
        }
    }

    #[test]
    fn unknown_builtin_is_config_error() {
        assert!(matches!(builtin("alexnet"), Err(Error::Config(_))));
    }

    #[test]
    fn kernel_accepts_scalar_or_pair() {
        let text = r#"
            name = "k"
            input_channels = 1
            reference_resolution = [8, 8]
            group_count = 1
            [[layers]]
            name = "a"
            kind = "conv"
            max_out_channels = 4
            kernel = [1, 3]
            [[layers]]
            name = "b"
            kind = "conv"
            max_out_channels = 4
            kernel = 5
        "#;
        let desc = ArchDescription::from_toml_str(text).unwrap();
        assert_eq!(desc.layers[0].kernel.unwrap().dims(), (1, 3));
        assert_eq!(desc.layers[1].kernel.unwrap().dims(), (5, 5));
        assert_eq!(desc.min_keep_ratio, 0.2);
    }

    #[test]
    fn round_trips_through_toml() {
        let desc = builtin("desk").unwrap();
        let again = ArchDescription::from_toml_str(&desc.to_toml_string()).unwrap();
        assert_eq!(desc, again);
    }
}
