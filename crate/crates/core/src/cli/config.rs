//! Declarative run configuration: JSON file, `--set key=value` overrides,
//! and resolution into model, data and training inputs.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{AugmentationConfig, Layout, PkSpec};
use crate::error::{Error, Result};
use crate::evaluator::Protocol;
use crate::loss::LossWeights;
use crate::model::{preset, ArchitectureSpec, BackboneKind, LaiSpec};
use crate::trainer::{FreezePhase, TrainPlan};

/// Environment variable consulted when `dataset.root` is unset.
pub const DATA_ROOT_ENV: &str = "MBR_DATA_ROOT";

/// Optional changes to a preset's architecture.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureOverrides {
    pub backbone: Option<BackboneKind>,
    pub base_width: Option<usize>,
    pub input_size: Option<usize>,
    pub last_stride: Option<usize>,
    pub mhsa_heads: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub root: Option<PathBuf>,
    pub layout: Layout,
    /// Camera and view counts for `-LAI` presets.
    pub side_info: Option<LaiSpec>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { root: None, layout: Layout::Veri776, side_info: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub p: usize,
    pub k: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { p: 6, k: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    /// Apply side embeddings at test time when the model has them.
    pub use_side_info: bool,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { protocol: Protocol::default(), use_side_info: true, batch_size: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub architecture: ArchitectureOverrides,
    /// Torchvision-layout safetensors file with backbone weights.
    pub pretrained: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub sampler: SamplerConfig,
    pub trainer: TrainPlan,
    pub loss: LossWeights,
    pub augmentation: AugmentationConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: "MBR-4B".into(),
            architecture: ArchitectureOverrides::default(),
            pretrained: None,
            dataset: DatasetConfig::default(),
            sampler: SamplerConfig::default(),
            trainer: TrainPlan::default(),
            loss: LossWeights::default(),
            augmentation: AugmentationConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            output_dir: "runs".into(),
        }
    }
}

fn from_value<T: DeserializeOwned>(value: Value) -> Result<T> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        Error::Config(format!("at `{path}`: {}", e.into_inner()))
    })
}

/// Parses an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a JSON tree, creating intermediate objects.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` has an empty segment")));
    }
    let mut node = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            other => {
                if !other.is_null() {
                    return Err(Error::Config(format!("`{}` is not a table", parts[..i].join("."))));
                }
                *other = Value::Object(Default::default());
                other.as_object_mut().expect("just created")
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parse_value(raw));
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last segment")
}

/// Defaults of `T`, then the optional JSON file, then `key=value` overrides
/// in order. Unknown keys are rejected with their path.
pub fn resolve<T: Default + Serialize + DeserializeOwned>(path: Option<&Path>, overrides: &[String]) -> Result<T> {
    let mut value = serde_json::to_value(T::default())?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
        let file: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{} is not valid JSON: {e}", p.display())))?;
        from_value::<T>(file.clone())?;
        merge(&mut value, file);
    }
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    from_value(value)
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let cfg: Self = resolve(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.trainer.validate()?;
        self.loss.validate()?;
        if self.sampler.p < 2 || self.sampler.k < 2 {
            return Err(Error::Config(format!("sampler.p and sampler.k must be >= 2, got {} and {}", self.sampler.p, self.sampler.k)));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        Ok(())
    }

    /// Dataset root from the config or the environment.
    pub fn data_root(&self) -> Result<PathBuf> {
        self.dataset
            .root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("dataset.root is unset and {DATA_ROOT_ENV} is not defined")))
    }

    /// Architecture for `num_classes` identities with overrides applied.
    pub fn architecture(&self, num_classes: Option<usize>) -> Result<ArchitectureSpec> {
        let mut spec = preset(&self.preset, self.dataset.side_info, num_classes)?;
        let o = &self.architecture;
        if o.base_width.is_some() || o.input_size.is_some() {
            let (w, s) = (o.base_width.unwrap_or(spec.base_width), o.input_size.unwrap_or(spec.input_size));
            spec = spec.scaled(w, s)?;
        }
        if let Some(b) = o.backbone {
            spec.backbone = b;
        }
        if let Some(s) = o.last_stride {
            spec.last_stride = s;
        }
        if let Some(h) = o.mhsa_heads {
            spec.mhsa_heads = h;
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Training plan with the freeze phase switched on for attention presets
    /// when the config leaves it unset.
    pub fn resolved_plan(&self, spec: &ArchitectureSpec) -> TrainPlan {
        let mut plan = self.trainer.clone();
        if plan.freeze_phase.is_none() && spec.contains_bot() {
            plan.freeze_phase = Some(FreezePhase::default());
        }
        plan
    }

    pub fn pk(&self) -> PkSpec {
        PkSpec { p: self.sampler.p, k: self.sampler.k, seed: self.seed }
    }

    /// Augmentation with its target matched to the model input.
    pub fn augmentation_for(&self, spec: &ArchitectureSpec) -> AugmentationConfig {
        AugmentationConfig { target_size: (spec.input_size, spec.input_size), ..self.augmentation.clone() }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v,
    }
}
