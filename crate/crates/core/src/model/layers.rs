//! Flat description of a built network, walked by the auditor.

use crate::nn::{ConvConfig, MhsaConfig, ParamGroup};

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv(ConvConfig),
    BatchNorm { channels: usize },
    InstanceNorm { channels: usize },
    Attention(MhsaConfig),
    MaxPool { channels: usize },
    GlobalAvgPool { channels: usize },
    Linear { in_features: usize, out_features: usize },
    SideEmbedding { numel: usize },
    /// Anything the FLOP walk has no rule for.
    Other(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRecord {
    pub name: String,
    pub group: ParamGroup,
    pub kind: LayerKind,
    /// Spatial size of the layer input.
    pub in_hw: (usize, usize),
}

impl LayerRecord {
    pub fn new(name: impl Into<String>, group: ParamGroup, kind: LayerKind, in_hw: (usize, usize)) -> Self {
        Self { name: name.into(), group, kind, in_hw }
    }
}
