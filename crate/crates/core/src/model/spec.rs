//! Declarative architecture descriptions and the preset registry.
//!
//! Loss-role convention for the loss-branch-split (LBS) presets, where each
//! unit embedding is trained by exactly one loss:
//!
//! * `MBR*-kB` (branching by expansion): within each pair of branches of the
//!   same block type, the first is `Cls` and the second `Metric`.
//! * `MBR*-4G` / `MBR_R50-2G` (branching by grouping): even group indices are
//!   `Cls`, odd ones `Metric`.
//! * `MBR*-2x2G`: each branch carries one `Cls` and one `Metric` group.
//!
//! Non-LBS presets (`R50`, `BoT`, `R50-*`, `Hybrid-*`) train every unit with
//! both losses (`Both`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Output width of a full stage-4 branch.
pub const EMBED_DIM: usize = 2048;
/// Channels of the shared stage-3 map for the standard backbone.
pub const STAGE3_CHANNELS: usize = 1024;
pub const MHSA_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BlockKind {
    /// ResNet50 bottleneck stage.
    R50,
    /// Bottleneck-transformer stage: 3x3 convs replaced by self-attention.
    Bot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum LossRole {
    Cls,
    Metric,
    Both,
}

impl LossRole {
    pub fn has_cls(self) -> bool {
        matches!(self, LossRole::Cls | LossRole::Both)
    }

    pub fn has_metric(self) -> bool {
        matches!(self, LossRole::Metric | LossRole::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    ResNet50,
    /// ResNet50-IBN-a: instance norm on half of the first bottleneck norm in stages 1-3.
    ResNet50IbnA,
}

/// One stage-4 branch. It consumes `input_channels` channels of the stage-3
/// map starting at `input_offset` and emits `groups` unit embeddings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchSpec {
    pub block: BlockKind,
    pub groups: usize,
    pub input_offset: usize,
    pub input_channels: usize,
    /// One role per group.
    pub roles: Vec<LossRole>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaiSpec {
    pub n_cam: usize,
    pub n_view: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub name: String,
    pub backbone: BackboneKind,
    pub branches: Vec<BranchSpec>,
    pub lai: Option<LaiSpec>,
    /// Classes seen by the classification heads; `None` builds a headless model.
    pub num_classes: Option<usize>,
    pub last_stride: usize,
    /// Stem width; 64 for the real network, smaller for test-sized models.
    pub base_width: usize,
    pub input_size: usize,
    pub mhsa_heads: usize,
}

impl ArchitectureSpec {
    /// Channels of the shared stage-3 map.
    pub fn stage3_channels(&self) -> usize {
        self.base_width * 16
    }

    pub fn feature_size(&self) -> usize {
        self.input_size / 16
    }

    /// Output width of branch `b` before it is split into units.
    pub fn branch_out_channels(&self, b: &BranchSpec) -> usize {
        b.input_channels * 2
    }

    pub fn branch_mid_channels(&self, b: &BranchSpec) -> usize {
        b.input_channels / 2
    }

    /// `(branch index, group index, role, dim)` of every unit in order.
    pub fn units(&self) -> Vec<UnitInfo> {
        let mut out = Vec::new();
        for (bi, b) in self.branches.iter().enumerate() {
            let dim = self.branch_out_channels(b) / b.groups;
            for (g, &role) in b.roles.iter().enumerate() {
                out.push(UnitInfo { branch: bi, group: g, role, dim });
            }
        }
        out
    }

    /// Length of the concatenated descriptor.
    pub fn global_dim(&self) -> usize {
        self.units().iter().map(|u| u.dim).sum()
    }

    /// Stage-3 channels consumed by one group (the `f_L3(g)` slice).
    pub fn input_slice_dim(&self) -> usize {
        self.branches
            .iter()
            .map(|b| b.input_channels / b.groups)
            .min()
            .unwrap_or(0)
    }

    pub fn contains_bot(&self) -> bool {
        self.branches.iter().any(|b| b.block == BlockKind::Bot)
    }

    pub fn is_lbs(&self) -> bool {
        self.units().iter().all(|u| u.role != LossRole::Both)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config(format!("{}: no branches", self.name)));
        }
        if self.base_width == 0 || self.base_width % 2 != 0 {
            return Err(Error::Config("base_width must be a positive even number".into()));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!("input_size {} must be a multiple of 16", self.input_size)));
        }
        if self.last_stride != 1 {
            return Err(Error::Config("the last stage must use stride 1".into()));
        }
        let c3 = self.stage3_channels();
        for (i, b) in self.branches.iter().enumerate() {
            if b.groups == 0 || b.roles.len() != b.groups {
                return Err(Error::Config(format!("branch {i}: one loss role per group required")));
            }
            if b.input_offset + b.input_channels > c3 || b.input_channels == 0 {
                return Err(Error::Config(format!(
                    "branch {i}: input channels {}..{} outside the {c3}-channel stage-3 map",
                    b.input_offset,
                    b.input_offset + b.input_channels
                )));
            }
            let mid = self.branch_mid_channels(b);
            if b.input_channels % b.groups != 0 || mid % b.groups != 0 {
                return Err(Error::Config(format!(
                    "branch {i}: groups={} must divide {} input and {mid} mid channels",
                    b.groups, b.input_channels
                )));
            }
            if b.block == BlockKind::Bot && mid % (b.groups * self.mhsa_heads) != 0 {
                return Err(Error::Config(format!("branch {i}: attention heads do not divide group width")));
            }
        }
        let units = self.units();
        let d = units[0].dim;
        if self.lai.is_some() && units.iter().any(|u| u.dim != d) {
            return Err(Error::Config("side embeddings need equal unit widths".into()));
        }
        if let Some(lai) = self.lai {
            if lai.n_cam == 0 || lai.n_view == 0 {
                return Err(Error::Config("side-embedding table needs n_cam, n_view >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnitInfo {
    pub branch: usize,
    pub group: usize,
    pub role: LossRole,
    pub dim: usize,
}

/// Every registry name, without the `-LAI` suffix.
pub const PRESETS: &[&str] = &[
    "R50",
    "BoT",
    "R50-2B",
    "R50-4B",
    "R50-2G",
    "R50-4G",
    "R50-2x2G",
    "MBR_R50-2B",
    "MBR_R50-4B",
    "MBR_R50-2G",
    "MBR_R50-4G",
    "MBR_R50-2x2G",
    "Hybrid-4G",
    "Hybrid-2x2G",
    "Hybrid-4B",
    "MBR-4G",
    "MBR-2x2G",
    "MBR-4B",
];

pub fn preset_names() -> Vec<String> {
    let mut v: Vec<String> = PRESETS.iter().map(|s| s.to_string()).collect();
    v.extend(PRESETS.iter().map(|s| format!("{s}-LAI")));
    v
}

use BlockKind::{Bot, R50};
use LossRole::{Both, Cls, Metric};

fn full(block: BlockKind, groups: usize, roles: Vec<LossRole>) -> BranchSpec {
    BranchSpec { block, groups, input_offset: 0, input_channels: STAGE3_CHANNELS, roles }
}

fn alternating(n: usize, lbs: bool) -> Vec<LossRole> {
    (0..n)
        .map(|i| match (lbs, i % 2) {
            (false, _) => Both,
            (true, 0) => Cls,
            (true, _) => Metric,
        })
        .collect()
}

/// Branch layout of a registry name (without `-LAI`).
fn preset_branches(base: &str) -> Option<Vec<BranchSpec>> {
    let (lbs, family) = if let Some(rest) = base.strip_prefix("MBR_R50-") {
        (true, format!("R50-{rest}"))
    } else if let Some(rest) = base.strip_prefix("MBR-") {
        (true, format!("Hybrid-{rest}"))
    } else {
        (false, base.to_string())
    };
    let b = match family.as_str() {
        "R50" if !lbs => vec![full(R50, 1, vec![Both])],
        "BoT" if !lbs => vec![full(Bot, 1, vec![Both])],
        "R50-2B" => alternating(2, lbs).into_iter().map(|r| full(R50, 1, vec![r])).collect(),
        "R50-4B" => alternating(4, lbs).into_iter().map(|r| full(R50, 1, vec![r])).collect(),
        "R50-2G" => vec![full(R50, 2, alternating(2, lbs))],
        "R50-4G" => vec![full(R50, 4, alternating(4, lbs))],
        "R50-2x2G" => vec![full(R50, 2, alternating(2, lbs)), full(R50, 2, alternating(2, lbs))],
        "Hybrid-4G" => {
            let half = STAGE3_CHANNELS / 2;
            vec![
                BranchSpec { block: R50, groups: 2, input_offset: 0, input_channels: half, roles: alternating(2, lbs) },
                BranchSpec { block: Bot, groups: 2, input_offset: half, input_channels: half, roles: alternating(2, lbs) },
            ]
        }
        "Hybrid-2x2G" => vec![full(R50, 2, alternating(2, lbs)), full(Bot, 2, alternating(2, lbs))],
        "Hybrid-4B" => {
            let roles = alternating(2, lbs);
            vec![
                full(R50, 1, vec![roles[0]]),
                full(R50, 1, vec![roles[1]]),
                full(Bot, 1, vec![roles[0]]),
                full(Bot, 1, vec![roles[1]]),
            ]
        }
        _ => return None,
    };
    Some(b)
}

/// Resolves a registry name into a full-size architecture.
///
/// `-LAI` names require `lai`; other names ignore it.
pub fn preset(name: &str, lai: Option<LaiSpec>, num_classes: Option<usize>) -> Result<ArchitectureSpec> {
    let (base, wants_lai) = match name.strip_suffix("-LAI") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let branches = preset_branches(base).ok_or_else(|| Error::UnknownPreset {
        name: name.to_string(),
        valid: preset_names(),
    })?;
    let lai = if wants_lai {
        Some(lai.ok_or_else(|| {
            Error::Config(format!("{name} needs camera/view metadata (n_cam, n_view) for its side embeddings"))
        })?)
    } else {
        None
    };
    let spec = ArchitectureSpec {
        name: name.to_string(),
        backbone: BackboneKind::ResNet50IbnA,
        branches,
        lai,
        num_classes,
        last_stride: 1,
        base_width: 64,
        input_size: 256,
        mhsa_heads: MHSA_HEADS,
    };
    spec.validate()?;
    Ok(spec)
}

impl ArchitectureSpec {
    /// Same topology at a reduced width and resolution, for fast tests.
    pub fn scaled(mut self, base_width: usize, input_size: usize) -> Result<Self> {
        let ratio_num = base_width * 16;
        let old = self.stage3_channels();
        for b in &mut self.branches {
            b.input_offset = b.input_offset * ratio_num / old;
            b.input_channels = b.input_channels * ratio_num / old;
        }
        self.base_width = base_width;
        self.input_size = input_size;
        self.validate()?;
        Ok(self)
    }
}
