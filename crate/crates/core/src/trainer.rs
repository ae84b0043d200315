//! Training loop: learning-rate schedule, Adam, optional freeze phase,
//! NDJSON metric logging and resumable checkpoints.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, load_image, to_batch, AugmentationConfig, DatasetManifest, Image, PkSampler, PkSpec};
use crate::error::{Error, Result};
use crate::loss::{lbs_total, LossWeights, UnitInput};
use crate::model::{CamView, Model, NamedTensor, TensorMap};
use crate::nn::{ParamGroup, ParamStore, SlotKind};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezePhase {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for FreezePhase {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainPlan {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    /// Preliminary epochs with the shared stages frozen, run before epoch 0.
    pub freeze_phase: Option<FreezePhase>,
    pub adam: AdamConfig,
    /// Save a checkpoint after every `checkpoint_every` main epochs (0 disables).
    pub checkpoint_every: usize,
    /// Keep decoded training images in memory across epochs.
    pub cache_images: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            epochs: 120,
            base_lr: 1e-4,
            warmup_epochs: 10,
            decay_epochs: vec![40, 70, 100],
            decay_factor: 0.1,
            freeze_phase: None,
            adam: AdamConfig::default(),
            checkpoint_every: 10,
            cache_images: false,
        }
    }
}

impl TrainPlan {
    /// Default recipe, with the freeze phase enabled iff the model has
    /// randomly initialized attention blocks.
    pub fn for_model(model: &Model) -> Self {
        Self { freeze_phase: model.spec.contains_bot().then(FreezePhase::default), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("trainer.epochs must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("trainer.base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("trainer.decay_factor must lie in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "trainer.decay_epochs must be strictly increasing, got {:?}",
                self.decay_epochs
            )));
        }
        if let Some(f) = &self.freeze_phase {
            if !(f.lr > 0.0 && f.lr.is_finite()) {
                return Err(Error::Config(format!("trainer.freeze_phase.lr must be positive, got {}", f.lr)));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Config("trainer.adam needs betas in [0, 1) and a positive eps".into()));
        }
        Ok(())
    }

    /// First epoch index to run: negative while a freeze phase is pending.
    pub fn first_epoch(&self) -> i64 {
        -(self.freeze_phase.map_or(0, |f| f.epochs) as i64)
    }

    /// Learning rate for any epoch, including the negative freeze epochs.
    pub fn lr_for(&self, epoch: i64) -> f64 {
        match (epoch < 0, self.freeze_phase) {
            (true, Some(f)) => f.lr,
            _ => lr_at(epoch.max(0) as usize, self),
        }
    }
}

/// Per-epoch schedule: linear warmup from `base/warmup` to `base`, then a
/// step decay by `decay_factor` at every listed epoch.
pub fn lr_at(epoch: usize, plan: &TrainPlan) -> f64 {
    if epoch < plan.warmup_epochs {
        return plan.base_lr * (epoch + 1) as f64 / plan.warmup_epochs as f64;
    }
    let steps = plan.decay_epochs.iter().filter(|&&d| d <= epoch).count();
    plan.base_lr * plan.decay_factor.powi(steps as i32)
}

/// Adam without weight decay; moments and step counts are kept per tensor.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    steps: Vec<u64>,
}

const STEPS_KEY: &str = "optim.steps";

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Self {
        let sizes: Vec<usize> = store
            .slots()
            .iter()
            .map(|s| if s.kind == SlotKind::Param { s.numel() } else { 0 })
            .collect();
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
        }
    }

    /// Updates every trainable parameter whose group passes `update`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, update: impl Fn(ParamGroup) -> bool) {
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        for (i, slot) in store.slots_mut().iter_mut().enumerate() {
            if slot.kind != SlotKind::Param || !slot.trainable || !update(slot.group) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let step = lr / bc1;
            let (b1, b2) = (beta1 as f32, beta2 as f32);
            for ((w, &g), (m, v)) in slot.value.iter_mut().zip(&slot.grad).zip(self.m[i].iter_mut().zip(self.v[i].iter_mut())) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let denom = ((*v as f64).sqrt() / bc2.sqrt() + eps) as f32;
                *w -= (step as f32) * *m / denom;
            }
        }
    }

    /// Moment tensors keyed `optim.m.<name>` / `optim.v.<name>` plus the
    /// JSON-encoded step counts for the checkpoint metadata.
    pub fn export(&self, store: &ParamStore) -> Result<(TensorMap, String)> {
        let mut tensors = TensorMap::new();
        let mut steps = BTreeMap::new();
        for (i, slot) in store.slots().iter().enumerate() {
            if slot.kind != SlotKind::Param {
                continue;
            }
            for (key, buf) in [("m", &self.m[i]), ("v", &self.v[i])] {
                tensors.insert(format!("optim.{key}.{}", slot.name), NamedTensor { shape: slot.shape.clone(), data: buf.clone() });
            }
            steps.insert(slot.name.clone(), self.steps[i]);
        }
        Ok((tensors, serde_json::to_string(&steps)?))
    }

    pub fn import(store: &ParamStore, cfg: AdamConfig, tensors: &TensorMap, steps_json: &str) -> Result<Self> {
        let steps: BTreeMap<String, u64> = serde_json::from_str(steps_json)?;
        let mut opt = Self::new(store, cfg);
        for (i, slot) in store.slots().iter().enumerate() {
            if slot.kind != SlotKind::Param {
                continue;
            }
            for (key, buf) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let name = format!("optim.{key}.{}", slot.name);
                let t = tensors.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))?;
                if t.data.len() != buf.len() {
                    return Err(Error::Checkpoint(format!("{name}: size {} != {}", t.data.len(), buf.len())));
                }
                buf.copy_from_slice(&t.data);
            }
            opt.steps[i] = *steps
                .get(&slot.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer step for {}", slot.name)))?;
        }
        Ok(opt)
    }
}

/// Everything needed to continue a run: weights, optimizer, position and seed.
/// Batch order and augmentation draws are derived from `(seed, epoch)`, so
/// no generator state beyond these needs to be stored.
#[derive(Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub next_epoch: i64,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: Model, plan: &TrainPlan, seed: u64) -> Self {
        let adam = Adam::new(&model.store, plan.adam);
        Self { model, adam, next_epoch: plan.first_epoch(), seed }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (extra, steps) = self.adam.export(&self.model.store)?;
        let metadata = HashMap::from([
            ("next_epoch".to_string(), self.next_epoch.to_string()),
            ("seed".to_string(), self.seed.to_string()),
            (STEPS_KEY.to_string(), steps),
        ]);
        self.model.save(path, metadata, extra)
    }

    pub fn load(path: &Path, plan: &TrainPlan) -> Result<Self> {
        let (model, meta, tensors) = Model::load(path)?;
        let field = |k: &str| {
            meta.get(k).ok_or_else(|| Error::Checkpoint(format!("{} has no `{k}` entry; not a training checkpoint", path.display())))
        };
        let parse_err = |k: &str| Error::Checkpoint(format!("{}: malformed `{k}` entry", path.display()));
        let next_epoch = field("next_epoch")?.parse().map_err(|_| parse_err("next_epoch"))?;
        let seed = field("seed")?.parse().map_err(|_| parse_err("seed"))?;
        let adam = Adam::import(&model.store, plan.adam, &tensors, field(STEPS_KEY)?)?;
        Ok(Self { model, adam, next_epoch, seed })
    }
}

/// Inputs of a training run besides the mutable state.
#[derive(Clone, Debug)]
pub struct TrainJob<'a> {
    pub manifest: &'a DatasetManifest,
    pub plan: &'a TrainPlan,
    pub weights: &'a LossWeights,
    pub pk: PkSpec,
    pub augment: &'a AugmentationConfig,
    pub out_dir: &'a Path,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: i64,
    pub iter: usize,
    pub lr: f64,
    pub loss_total: f64,
    /// Weighted loss of every unit embedding, in unit order.
    pub loss_by_branch: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: i64,
    pub lr: f64,
    pub iters: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochSummary>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";
pub const SNAPSHOT_FILE: &str = "nonfinite_snapshot.safetensors";

fn all_finite(t: &crate::Tensor) -> bool {
    t.data().iter().all(|v| v.is_finite())
}

pub fn checkpoint_name(epoch: i64) -> String {
    format!("epoch_{:03}.safetensors", epoch + 1)
}

/// Camera/view pairs for the side embeddings; absent views map to 0.
pub fn metadata_of(manifest: &DatasetManifest, idx: &[usize]) -> Vec<CamView> {
    idx.iter()
        .map(|&i| {
            let r = &manifest.records[i];
            CamView { camera: r.camera_id, view: r.view_id.unwrap_or(0) }
        })
        .collect()
}

struct ImageSource<'a> {
    manifest: &'a DatasetManifest,
    size: usize,
    cache: Option<HashMap<usize, Image>>,
}

impl ImageSource<'_> {
    fn get(&mut self, i: usize) -> Result<Image> {
        if let Some(img) = self.cache.as_ref().and_then(|c| c.get(&i)) {
            return Ok(img.clone());
        }
        let img = load_image(&self.manifest.records[i].path, self.size)?;
        if let Some(c) = &mut self.cache {
            c.insert(i, img.clone());
        }
        Ok(img)
    }
}

fn epoch_rng(seed: u64, epoch: i64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add(0xA076_1D64_78BD_642F).wrapping_mul(31) ^ (epoch as u64).rotate_left(17))
}

/// Runs the remaining epochs of `state`, appending to `metrics.ndjson` and
/// writing checkpoints into `job.out_dir`. `on_epoch` observes each finished
/// epoch together with the model at that point.
pub fn run_training(state: &mut TrainState, job: &TrainJob<'_>, mut on_epoch: impl FnMut(&EpochSummary, &Model)) -> Result<TrainOutcome> {
    let plan = job.plan;
    plan.validate()?;
    job.weights.validate()?;
    let spec = &state.model.spec;
    if plan.freeze_phase.is_some() != spec.contains_bot() {
        return Err(Error::Config(format!(
            "preset {} {} attention blocks; the freeze phase must be {}",
            spec.name,
            if spec.contains_bot() { "has randomly initialized" } else { "has no" },
            if spec.contains_bot() { "enabled" } else { "disabled" }
        )));
    }
    if spec.num_classes != Some(job.manifest.n_classes) {
        return Err(Error::Config(format!(
            "model has {:?} classes but the training split has {} identities",
            spec.num_classes, job.manifest.n_classes
        )));
    }
    let size = spec.input_size;
    if job.augment.target_size != (size, size) {
        return Err(Error::Config(format!(
            "augmentation target {:?} does not match the model input {size}",
            job.augment.target_size
        )));
    }
    if let Some(lai) = &state.model.lai {
        let (cams, views) = job.manifest.metadata_extent();
        if cams > lai.n_cam || views > lai.n_view {
            return Err(Error::Metadata(format!(
                "training split needs {cams} cameras and {views} views, side embeddings hold {} and {}",
                lai.n_cam, lai.n_view
            )));
        }
    }
    let roles: Vec<_> = state.model.units().iter().map(|u| u.role).collect();
    let classes = job.manifest.class_map();
    let sampler = PkSampler::new(job.manifest, PkSpec { seed: job.pk.seed ^ state.seed, ..job.pk })?;
    fs::create_dir_all(job.out_dir)?;
    let mut log = BufWriter::new(OpenOptions::new().create(true).append(true).open(job.out_dir.join(METRICS_FILE))?);
    let mut images = ImageSource {
        manifest: job.manifest,
        size,
        cache: plan.cache_images.then(HashMap::new),
    };
    let mut summaries = Vec::new();
    let mut checkpoints = Vec::new();
    let use_lai = state.model.lai.is_some();

    while state.next_epoch < plan.epochs as i64 {
        let epoch = state.next_epoch;
        let frozen = epoch < 0;
        let lr = plan.lr_for(epoch);
        let mut rng = epoch_rng(state.seed, epoch);
        let batches = sampler.epoch(epoch as u64);
        let mut total = 0.0;
        for (iter, idx) in batches.iter().enumerate() {
            let mut batch = Vec::with_capacity(idx.len());
            for &i in idx {
                let mut img = augment(&images.get(i)?, job.augment, &mut rng);
                img.normalize();
                batch.push(img);
            }
            let x = to_batch(&batch)?;
            let meta = use_lai.then(|| metadata_of(job.manifest, idx));
            let targets: Vec<usize> = idx.iter().map(|&i| classes[&job.manifest.records[i].vehicle_id]).collect();
            let out = state.model.forward_train(&x, meta.as_deref(), !frozen)?;
            let bad_unit = out
                .units
                .iter()
                .zip(&out.logits)
                .position(|(u, l)| !all_finite(u) || l.as_ref().is_some_and(|l| !all_finite(l)));
            let inputs: Vec<UnitInput<'_>> = roles
                .iter()
                .zip(&out.units)
                .zip(&out.logits)
                .map(|((&role, embedding), logits)| UnitInput { role, embedding, logits: logits.as_ref() })
                .collect();
            let report = match bad_unit {
                None => Some(lbs_total(&inputs, &targets, job.weights)?).filter(|r| r.total.is_finite()),
                Some(_) => None,
            };
            let Some(report) = report else {
                let snapshot = job.out_dir.join(SNAPSHOT_FILE);
                state.save(&snapshot)?;
                let what = match bad_unit {
                    Some(u) => format!("unit {u} produced non-finite activations"),
                    None => "the loss diverged".to_string(),
                };
                return Err(Error::NonFinite { epoch, iter, detail: format!("{what}; state saved to {}", snapshot.display()) });
            };
            state.model.store.zero_grad();
            state.model.backward(&report.d_embeddings, &report.d_logits)?;
            state.adam.step(&mut state.model.store, lr, |g| !frozen || g != ParamGroup::Trunk);
            let record = LogRecord {
                epoch,
                iter,
                lr,
                loss_total: report.total,
                loss_by_branch: report.per_unit.iter().map(|u| u.weighted).collect(),
            };
            serde_json::to_writer(&mut log, &record)?;
            log.write_all(b"\n")?;
            total += report.total;
            log::debug!("epoch {epoch} iter {iter} lr {lr:.3e} loss {:.5}", report.total);
        }
        log.flush()?;
        let summary = EpochSummary { epoch, lr, iters: batches.len(), mean_loss: total / batches.len().max(1) as f64 };
        log::info!("epoch {epoch}: lr {lr:.3e}, mean loss {:.5} over {} iterations", summary.mean_loss, summary.iters);
        on_epoch(&summary, &state.model);
        summaries.push(summary);
        state.next_epoch += 1;
        if !frozen && plan.checkpoint_every > 0 && (epoch + 1) % plan.checkpoint_every as i64 == 0 {
            let path = job.out_dir.join(checkpoint_name(epoch));
            state.save(&path)?;
            checkpoints.push(path);
        }
    }
    let final_checkpoint = job.out_dir.join(FINAL_CHECKPOINT);
    state.save(&final_checkpoint)?;
    Ok(TrainOutcome { epochs: summaries, checkpoints, final_checkpoint })
}

/// Reads a metrics stream back.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Creates `<root>/<prefix>-<UTC timestamp>` (with a numeric suffix on collision).
pub fn timestamped_dir(root: &Path, prefix: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    for n in 0.. {
        let name = if n == 0 { format!("{prefix}-{stamp}") } else { format!("{prefix}-{stamp}-{n}") };
        let dir = root.join(name);
        if !dir.exists() {
            fs::create_dir_all(&dir)?;
            return Ok(dir);
        }
    }
    unreachable!("unbounded suffix search")
}
