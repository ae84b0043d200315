//! Weight files: safetensors containers with a string metadata map.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{ArchitectureSpec, BlockKind, Model};
use crate::error::{Error, Result};
use crate::nn::ParamGroup;

/// Metadata key holding the serialized [`ArchitectureSpec`].
pub const SPEC_KEY: &str = "spec";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub type TensorMap = BTreeMap<String, NamedTensor>;

fn st_err(e: safetensors::SafeTensorError) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Writes tensors atomically: a sibling temp file is renamed over `path`.
pub fn write_tensors(path: &Path, tensors: &TensorMap, metadata: HashMap<String, String>) -> Result<()> {
    let bytes: Vec<(String, Vec<u8>, Vec<usize>)> = tensors
        .iter()
        .map(|(k, t)| (k.clone(), t.data.iter().flat_map(|v| v.to_le_bytes()).collect(), t.shape.clone()))
        .collect();
    let views = bytes
        .iter()
        .map(|(k, b, s)| TensorView::new(Dtype::F32, s.clone(), b).map(|v| (k.as_str(), v)))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(st_err)?;
    let buf = safetensors::serialize(views, Some(metadata)).map_err(st_err)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, buf)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(TensorMap, HashMap<String, String>)> {
    let buf = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, meta) = SafeTensors::read_metadata(&buf).map_err(st_err)?;
    let st = SafeTensors::deserialize(&buf).map_err(st_err)?;
    let mut out = TensorMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Checkpoint(format!("{name}: only f32 tensors are supported, found {:?}", view.dtype())));
        }
        let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.insert(name, NamedTensor { shape: view.shape().to_vec(), data });
    }
    Ok((out, meta.metadata().clone().unwrap_or_default()))
}

pub fn read_tensors(path: &Path) -> Result<TensorMap> {
    Ok(read_file(path)?.0)
}

/// Source name in a torchvision-layout ResNet50 and the diagonal-block
/// offset of a grouped branch (`g0` in units of groups).
struct Source {
    name: String,
    group_offset: usize,
    groups: usize,
}

impl Model {
    /// Every weight and buffer of the model.
    pub fn state(&self) -> TensorMap {
        self.store
            .slots()
            .iter()
            .map(|s| (s.name.clone(), NamedTensor { shape: s.shape.clone(), data: s.value.clone() }))
            .collect()
    }

    /// Loads a full state; every slot must be present with a matching shape.
    pub fn load_state(&mut self, tensors: &TensorMap) -> Result<()> {
        for slot in self.store.slots_mut() {
            let t = tensors
                .get(&slot.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", slot.name)))?;
            if t.shape != slot.shape {
                return Err(Error::Checkpoint(format!(
                    "{}: expected shape {:?}, found {:?}",
                    slot.name, slot.shape, t.shape
                )));
            }
            slot.value.copy_from_slice(&t.data);
        }
        Ok(())
    }

    /// Saves weights with the spec and caller metadata; `extra` tensors (e.g.
    /// optimizer moments) are stored alongside.
    pub fn save(&self, path: &Path, mut metadata: HashMap<String, String>, extra: TensorMap) -> Result<()> {
        metadata.insert(SPEC_KEY.into(), serde_json::to_string(&self.spec)?);
        let mut tensors = self.state();
        tensors.extend(extra);
        write_tensors(path, &tensors, metadata)
    }

    /// Rebuilds the exact architecture stored in a checkpoint and loads it.
    pub fn load(path: &Path) -> Result<(Model, HashMap<String, String>, TensorMap)> {
        let (tensors, meta) = read_file(path)?;
        let spec: ArchitectureSpec = serde_json::from_str(
            meta.get(SPEC_KEY)
                .ok_or_else(|| Error::Checkpoint(format!("{} has no architecture spec", path.display())))?,
        )?;
        let mut model = Model::new(spec, 0)?;
        model.load_state(&tensors)?;
        Ok((model, meta, tensors))
    }

    fn backbone_source(&self, name: &str, group: ParamGroup) -> Option<Source> {
        match group {
            ParamGroup::Trunk => Some(Source { name: name.to_string(), group_offset: 0, groups: 1 }),
            ParamGroup::Branch(i) => {
                let b = &self.branches[i].spec;
                let rest = name.strip_prefix(&format!("branches.{i}."))?;
                let (_, leaf) = rest.split_once('.')?;
                if b.block == BlockKind::Bot && leaf.starts_with("conv2.") {
                    return None;
                }
                let per_group = b.input_channels / b.groups;
                Some(Source { name: format!("layer4.{rest}"), group_offset: b.input_offset / per_group, groups: b.groups })
            }
            _ => None,
        }
    }

    /// Loads stem and stage 1-4 weights from a torchvision-layout ResNet50
    /// (optionally IBN-a). Attention weights, heads and side embeddings keep
    /// their fresh initialization. Grouped branches take the diagonal blocks
    /// of the dense source kernels. Returns the number of tensors loaded.
    pub fn load_backbone(&mut self, src: &TensorMap) -> Result<usize> {
        let plan: Vec<(usize, Source)> = self
            .store
            .slots()
            .iter()
            .enumerate()
            .filter_map(|(i, s)| self.backbone_source(&s.name, s.group).map(|src| (i, src)))
            .collect();
        let mut loaded = 0;
        for (i, source) in plan {
            let slot = &mut self.store.slots_mut()[i];
            let (t, channel_base) = match src.get(&source.name) {
                Some(t) => (t, 0),
                None => match ibn_fallback(&source.name, slot.shape[0]) {
                    Some((n, base)) if src.contains_key(&n) => (&src[&n], base),
                    _ => return Err(Error::Checkpoint(format!("pretrained file lacks {}", source.name))),
                },
            };
            let shape = slot.shape.clone();
            let bad = || Error::Checkpoint(format!("{}: cannot map shape {:?} onto {shape:?}", source.name, t.shape));
            if shape.len() == 4 {
                let [out, cin, kh, kw] = [shape[0], shape[1], shape[2], shape[3]];
                let out_g = out / source.groups;
                if t.shape.len() != 4 || t.shape[2] != kh || t.shape[3] != kw {
                    return Err(bad());
                }
                let (s_out, s_in) = (t.shape[0], t.shape[1]);
                let k = kh * kw;
                for o in 0..out {
                    let gg = source.group_offset + o / out_g;
                    let so = gg * out_g + o % out_g;
                    let si0 = gg * cin;
                    if so >= s_out || si0 + cin > s_in {
                        return Err(bad());
                    }
                    let dst = &mut slot.value[o * cin * k..(o + 1) * cin * k];
                    let from = (so * s_in + si0) * k;
                    dst.copy_from_slice(&t.data[from..from + cin * k]);
                }
            } else {
                let c = shape[0];
                let start = channel_base + source.group_offset * (c / source.groups);
                if t.shape.len() != 1 || start + c > t.shape[0] {
                    return Err(bad());
                }
                slot.value.copy_from_slice(&t.data[start..start + c]);
            }
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Maps an IBN-a tensor name onto a plain ResNet50 norm name and the channel
/// offset of its half.
fn ibn_fallback(name: &str, channels: usize) -> Option<(String, usize)> {
    if let Some((head, leaf)) = name.rsplit_once(".IN.") {
        return (leaf == "weight" || leaf == "bias").then(|| (format!("{head}.{leaf}"), 0));
    }
    let (head, leaf) = name.rsplit_once(".BN.")?;
    Some((format!("{head}.{leaf}"), channels))
}
