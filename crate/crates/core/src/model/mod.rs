//! The multi-branch re-identification network: a shared stem and stages 1-3,
//! one stage-4 branch per [`BranchSpec`], optional grouping inside a branch,
//! per-unit heads and the side-embedding table.

pub mod blocks;
pub mod checkpoint;
pub mod lai;
pub mod layers;
pub mod spec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::{Bottleneck, BottleneckConfig, Stage, Trunk};
pub use checkpoint::{read_file, read_tensors, write_tensors, NamedTensor, TensorMap};
pub use lai::{CamView, LaiTable};
pub use layers::{LayerKind, LayerRecord};
pub use spec::{preset, preset_names, PRESETS, ArchitectureSpec, BackboneKind, BlockKind, BranchSpec, LaiSpec, LossRole, UnitInfo};

use crate::error::{Error, Result};
use crate::nn::ops::{gap, gap_backward};
use crate::nn::{BatchNorm2d, Linear, ParamGroup, ParamStore, Scope};
use crate::tensor::Tensor;

/// Eval-mode output: every unit embedding plus the normalized concatenation.
#[derive(Clone, Debug)]
pub struct EmbeddingBundle {
    pub units: Vec<Tensor>,
    pub roles: Vec<LossRole>,
    /// `(N, global_dim)`; each unit slice has unit L2 norm (or is zero).
    pub global: Tensor,
}

/// Training-mode output.
#[derive(Debug)]
pub struct TrainOutput {
    /// Unit embeddings seen by the losses (GAP output plus side embedding).
    pub units: Vec<Tensor>,
    /// Class logits for every unit carrying a classification loss.
    pub logits: Vec<Option<Tensor>>,
}

/// BN neck followed by a bias-free classifier.
#[derive(Debug)]
pub struct ClsHead {
    pub neck: BatchNorm2d,
    pub classifier: Linear,
}

#[derive(Debug)]
pub struct Branch {
    pub spec: BranchSpec,
    pub stage: Stage,
    out_hw: Option<(usize, usize)>,
}

#[derive(Debug)]
struct TrainState {
    meta: Option<Vec<CamView>>,
    f3_shape: Vec<usize>,
    train_trunk: bool,
}

#[derive(Debug)]
pub struct Model {
    pub spec: ArchitectureSpec,
    pub store: ParamStore,
    pub trunk: Trunk,
    pub branches: Vec<Branch>,
    pub heads: Vec<Option<ClsHead>>,
    pub lai: Option<LaiTable>,
    state: Option<TrainState>,
}

/// L2-normalizes each row of each unit (`v / (‖v‖ + 1e-12)`) and concatenates.
pub fn assemble(units: &[Tensor]) -> Result<Tensor> {
    let n = match units.first() {
        Some(u) => u.dims2()?.0,
        None => return Err(Error::Shape("assemble needs at least one unit".into())),
    };
    let dims = units.iter().map(|u| u.dims2().map(|(_, d)| d)).collect::<Result<Vec<_>>>()?;
    let total: usize = dims.iter().sum();
    let mut out = vec![0f32; n * total];
    let mut col = 0;
    for (u, &d) in units.iter().zip(&dims) {
        if u.dims2()?.0 != n || d == 0 {
            return Err(Error::Shape("units must share the batch size and be non-empty".into()));
        }
        for (i, row) in u.data().chunks(d).enumerate() {
            let norm = row.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt() + 1e-12;
            for (j, v) in row.iter().enumerate() {
                out[i * total + col + j] = (*v as f64 / norm) as f32;
            }
        }
        col += d;
    }
    Tensor::from_vec(&[n, total], out)
}

fn split_columns(x: &Tensor, parts: usize) -> Result<Vec<Tensor>> {
    let (n, c) = x.dims2()?;
    let d = c / parts;
    (0..parts)
        .map(|p| {
            let data = x.data().chunks(c).flat_map(|row| row[p * d..(p + 1) * d].iter().copied()).collect();
            Tensor::from_vec(&[n, d], data)
        })
        .collect()
}

fn join_columns(parts: &[Tensor]) -> Result<Tensor> {
    let (n, d) = parts[0].dims2()?;
    let c = d * parts.len();
    let mut out = vec![0f32; n * c];
    for (p, t) in parts.iter().enumerate() {
        for (i, row) in t.data().chunks(d).enumerate() {
            out[i * c + p * d..i * c + (p + 1) * d].copy_from_slice(row);
        }
    }
    Tensor::from_vec(&[n, c], out)
}

/// Builds a model with seeded random weights, optionally loading backbone
/// weights (stem, stages 1-4, attention excluded) from a safetensors file.
pub fn build_model(spec: &ArchitectureSpec, seed: u64, pretrained: Option<&std::path::Path>) -> Result<Model> {
    let mut model = Model::new(spec.clone(), seed)?;
    if let Some(path) = pretrained {
        let tensors = checkpoint::read_tensors(path)?;
        model.load_backbone(&tensors)?;
    }
    Ok(model)
}

impl Model {
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ibn = spec.backbone == BackboneKind::ResNet50IbnA;
        let trunk = Trunk::new(&mut store, &Scope::new("", ParamGroup::Trunk), spec.base_width, ibn, &mut rng)?;
        let fs = spec.feature_size();
        let mut branches = Vec::new();
        for (i, b) in spec.branches.iter().enumerate() {
            let attention = match b.block {
                BlockKind::R50 => None,
                BlockKind::Bot => Some((spec.mhsa_heads, fs, fs)),
            };
            let cfg = BottleneckConfig {
                in_channels: b.input_channels,
                mid_channels: spec.branch_mid_channels(b),
                out_channels: spec.branch_out_channels(b),
                stride: spec.last_stride,
                groups: b.groups,
                ibn: false,
                attention,
            };
            let scope = Scope::new(&format!("branches.{i}"), ParamGroup::Branch(i));
            let stage = Stage::new(&mut store, &scope, cfg, 3, &mut rng)?;
            branches.push(Branch { spec: b.clone(), stage, out_hw: None });
        }
        let mut heads = Vec::new();
        for (u, unit) in spec.units().iter().enumerate() {
            let head = match spec.num_classes {
                Some(c) if unit.role.has_cls() => {
                    let scope = Scope::new(&format!("heads.{u}"), ParamGroup::Head(u));
                    let neck = BatchNorm2d::new(&mut store, &scope.sub("neck"), unit.dim);
                    store.set_trainable(neck.bias, false);
                    let classifier = Linear::new(&mut store, &scope.sub("classifier"), unit.dim, c, &mut rng);
                    Some(ClsHead { neck, classifier })
                }
                _ => None,
            };
            heads.push(head);
        }
        let lai = spec.lai.map(|l| {
            let units = spec.units();
            LaiTable::new(&mut store, units.len(), units[0].dim, l.n_cam, l.n_view)
        });
        Ok(Self { spec, store, trunk, branches, heads, lai, state: None })
    }

    pub fn units(&self) -> Vec<UnitInfo> {
        self.spec.units()
    }

    /// Stem and stages 1-3: `(N, 3, S, S)` to `(N, 16 * base, S/16, S/16)`.
    pub fn forward_shared(&self, x: &Tensor) -> Result<Tensor> {
        self.trunk.forward(&self.store, x, self.spec.input_size)
    }

    /// Runs one stage-4 branch on the stage-3 map and returns its unit embeddings.
    pub fn branch_forward(&self, f3: &Tensor, branch: usize) -> Result<Vec<Tensor>> {
        let b = self.branches.get(branch).ok_or_else(|| Error::Config(format!("no branch {branch}")))?;
        let x = f3.channel_slice(b.spec.input_offset, b.spec.input_offset + b.spec.input_channels)?;
        let y = gap(&b.stage.forward(&self.store, &x)?)?;
        split_columns(&y, b.spec.groups)
    }

    fn check_meta(&self, n: usize, meta: Option<&[CamView]>) -> Result<()> {
        match (&self.lai, meta) {
            (Some(_), None) => Err(Error::Metadata("side embeddings need camera/view ids".into())),
            (Some(_), Some(m)) if m.len() != n => {
                Err(Error::Metadata(format!("{} metadata rows for a batch of {n}", m.len())))
            }
            _ => Ok(()),
        }
    }

    /// Eval-mode forward. `meta` is required when the model has side embeddings.
    pub fn forward(&self, x: &Tensor, meta: Option<&[CamView]>) -> Result<EmbeddingBundle> {
        let n = x.dims4()?.0;
        self.check_meta(n, meta)?;
        self.embed(x, meta)
    }

    /// Eval-mode forward that skips the side embeddings even when the model has them.
    pub fn forward_without_side(&self, x: &Tensor) -> Result<EmbeddingBundle> {
        self.embed(x, None)
    }

    fn embed(&self, x: &Tensor, meta: Option<&[CamView]>) -> Result<EmbeddingBundle> {
        let f3 = self.forward_shared(x)?;
        let mut units = Vec::new();
        for b in 0..self.branches.len() {
            units.extend(self.branch_forward(&f3, b)?);
        }
        if let (Some(lai), Some(m)) = (&self.lai, meta) {
            lai.apply(&self.store, &mut units, m)?;
        }
        let global = assemble(&units)?;
        let roles = self.units().iter().map(|u| u.role).collect();
        Ok(EmbeddingBundle { units, roles, global })
    }

    /// Training-mode forward with batch statistics. With `train_trunk` off the
    /// shared stages run in inference mode and receive no gradient.
    pub fn forward_train(&mut self, x: &Tensor, meta: Option<&[CamView]>, train_trunk: bool) -> Result<TrainOutput> {
        let n = x.dims4()?.0;
        self.check_meta(n, meta)?;
        let f3 = if train_trunk {
            self.trunk.forward_train(&mut self.store, x, self.spec.input_size)?
        } else {
            self.trunk.forward(&self.store, x, self.spec.input_size)?
        };
        let mut units = Vec::new();
        for b in &mut self.branches {
            let s = &b.spec;
            let xb = f3.channel_slice(s.input_offset, s.input_offset + s.input_channels)?;
            let y = b.stage.forward_train(&mut self.store, &xb)?;
            let (_, _, h, w) = y.dims4()?;
            b.out_hw = Some((h, w));
            units.extend(split_columns(&gap(&y)?, s.groups)?);
        }
        if let Some(lai) = &self.lai {
            lai.apply(&self.store, &mut units, meta.unwrap_or_default())?;
        }
        let mut logits = Vec::with_capacity(units.len());
        for (u, head) in units.iter().zip(&mut self.heads) {
            logits.push(match head {
                Some(h) => {
                    let (n, d) = u.dims2()?;
                    let z = h.neck.forward_train(&mut self.store, &u.clone().reshape(&[n, d, 1, 1])?)?;
                    Some(h.classifier.forward_train(&self.store, &z.reshape(&[n, d])?)?)
                }
                None => None,
            });
        }
        self.state = Some(TrainState {
            meta: meta.map(<[CamView]>::to_vec),
            f3_shape: f3.shape().to_vec(),
            train_trunk,
        });
        Ok(TrainOutput { units, logits })
    }

    /// Backpropagates loss gradients w.r.t. the unit embeddings and the logits
    /// of the last [`Model::forward_train`] call, accumulating into the store.
    pub fn backward(&mut self, d_units: &[Option<Tensor>], d_logits: &[Option<Tensor>]) -> Result<()> {
        let state = self
            .state
            .take()
            .ok_or_else(|| Error::Shape("backward without a training forward".into()))?;
        let n_units = self.heads.len();
        if d_units.len() != n_units || d_logits.len() != n_units {
            return Err(Error::Shape(format!("expected gradients for {n_units} units")));
        }
        let n = state.f3_shape[0];
        let mut grads: Vec<Option<Tensor>> = d_units.to_vec();
        for (u, head) in self.heads.iter_mut().enumerate() {
            if let (Some(h), Some(dz)) = (head, &d_logits[u]) {
                let dim = h.neck.channels;
                let g = h.classifier.backward(&mut self.store, dz)?;
                let g = h.neck.backward(&mut self.store, &g.reshape(&[n, dim, 1, 1])?)?.reshape(&[n, dim])?;
                match &mut grads[u] {
                    Some(t) => crate::tensor::add_assign(t.data_mut(), g.data()),
                    slot => *slot = Some(g),
                }
            }
        }
        if let Some(lai) = &self.lai {
            lai.backward(&mut self.store, &grads, state.meta.as_deref().unwrap_or_default());
        }
        let mut df3 = Tensor::zeros(&state.f3_shape);
        let mut u = 0;
        for b in &mut self.branches {
            let g = b.spec.groups;
            let dim = 2 * b.spec.input_channels / g;
            let parts: Vec<Tensor> = grads[u..u + g]
                .iter()
                .map(|t| t.clone().unwrap_or_else(|| Tensor::zeros(&[n, dim])))
                .collect();
            u += g;
            let (h, w) = b.out_hw.take().ok_or_else(|| Error::Shape("branch backward without forward".into()))?;
            let dy = gap_backward(&join_columns(&parts)?, h, w)?;
            let dx = b.stage.backward(&mut self.store, &dy)?;
            df3.add_channel_slice(b.spec.input_offset, &dx)?;
        }
        if state.train_trunk {
            self.trunk.backward(&mut self.store, &df3)?;
        }
        Ok(())
    }

    /// Every layer in forward order, for the FLOP and parameter walks.
    pub fn layers(&self) -> Result<Vec<LayerRecord>> {
        let mut out = Vec::new();
        let hw = self.trunk.describe(self.spec.input_size, &mut out)?;
        for (i, b) in self.branches.iter().enumerate() {
            let group = ParamGroup::Branch(i);
            let out_hw = b.stage.describe(&format!("branches.{i}"), group, hw, &mut out)?;
            let kind = LayerKind::GlobalAvgPool { channels: 2 * b.spec.input_channels };
            out.push(LayerRecord::new(format!("branches.{i}.gap"), group, kind, out_hw));
        }
        for (u, head) in self.heads.iter().enumerate() {
            if let Some(h) = head {
                let g = ParamGroup::Head(u);
                out.push(LayerRecord::new(format!("heads.{u}.neck"), g, LayerKind::BatchNorm { channels: h.neck.channels }, (1, 1)));
                let kind = LayerKind::Linear { in_features: h.classifier.in_features, out_features: h.classifier.out_features };
                out.push(LayerRecord::new(format!("heads.{u}.classifier"), g, kind, (1, 1)));
            }
        }
        if let Some(l) = &self.lai {
            let kind = LayerKind::SideEmbedding { numel: LaiTable::param_count(l.units, l.dim, l.n_cam, l.n_view) };
            out.push(LayerRecord::new("lai", ParamGroup::Lai, kind, (1, 1)));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
