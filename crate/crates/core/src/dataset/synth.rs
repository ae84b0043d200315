use std::f32::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::manifest::{write_csv, DatasetManifest, ImageRecord, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_ids: usize,
    pub n_cams: usize,
    pub n_views: usize,
    pub imgs_per_id: usize,
    pub query_per_id: usize,
    pub gallery_per_id: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_ids: 10,
            n_cams: 4,
            n_views: 2,
            imgs_per_id: 8,
            query_per_id: 2,
            gallery_per_id: 4,
            image_size: 256,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub train: DatasetManifest,
    pub query: DatasetManifest,
    pub gallery: DatasetManifest,
}

impl SynthDataset {
    pub fn split(&self, split: Split) -> &DatasetManifest {
        match split {
            Split::Train => &self.train,
            Split::Query => &self.query,
            Split::Gallery => &self.gallery,
        }
    }
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let k = |n: f32| (n + h * 6.0) % 6.0;
    let f = |n: f32| v - v * s * k(n).min(4.0 - k(n)).clamp(0.0, 1.0);
    [f(5.0), f(3.0), f(1.0)]
}

/// Appearance shared by every image of an identity.
struct Identity {
    color: [f32; 3],
    accent: [f32; 3],
    shape: usize,
    stripe_period: f32,
    stripe_vertical: bool,
}

impl Identity {
    fn new(id: usize, n_ids: usize) -> Self {
        let hue = id as f32 / n_ids as f32;
        Self {
            color: hsv(hue, 0.85, 0.9),
            accent: hsv((hue + 0.5) % 1.0, 0.6, 0.35 + 0.1 * (id % 3) as f32),
            shape: id % 5,
            stripe_period: 5.0 + ((id * 7) % 9) as f32,
            stripe_vertical: (id / 5) % 2 == 1,
        }
    }

    /// Whether normalized body coordinates `(u, v)` in `[-1, 1]` fall inside the shape.
    fn inside(&self, u: f32, v: f32) -> bool {
        match self.shape {
            0 => u.abs() <= 1.0 && v.abs() <= 0.6,
            1 => u * u + (v / 0.7).powi(2) <= 1.0,
            2 => (-0.8..=0.8).contains(&v) && u.abs() <= (0.8 - v) * 0.62,
            3 => (u.abs() <= 1.0 && v.abs() <= 0.3) || (u.abs() <= 0.3 && v.abs() <= 0.9),
            _ => {
                let r = (u * u + v * v).sqrt();
                (0.45..=0.95).contains(&r)
            }
        }
    }
}

/// Renders one image of `id` seen by `camera` from `view`.
fn render(ident: &Identity, camera: usize, n_cams: usize, view: usize, size: usize, rng: &mut ChaCha8Rng) -> Image {
    let phase = 2.0 * PI * camera as f32 / n_cams.max(1) as f32;
    let tint = [1.0 + 0.15 * phase.cos(), 1.0 + 0.15 * (phase + 2.1).cos(), 1.0 + 0.15 * (phase + 4.2).cos()];
    let bg = [0.35 + 0.2 * phase.sin(), 0.4, 0.45 - 0.15 * phase.sin()];
    let s = size as f32;
    let cx = s * (0.5 + rng.random_range(-0.08..0.08));
    let cy = s * (0.5 + rng.random_range(-0.08..0.08));
    let scale = s * 0.32 * rng.random_range(0.9..1.1);
    let stretch = 1.0 + 0.3 * view as f32;
    let mirror = if view % 2 == 1 { -1.0 } else { 1.0 };
    let noise = Normal::new(0.0f32, 0.03).expect("valid std");
    let mut img = Image::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let u = (x as f32 - cx) / (scale * stretch) * mirror;
            let v = (y as f32 - cy) / scale;
            let base = if ident.inside(u, v) {
                let t = if ident.stripe_vertical { u } else { v } * scale;
                if (t / ident.stripe_period).floor() as i64 % 2 == 0 {
                    ident.color
                } else {
                    ident.accent
                }
            } else {
                let grain = 0.05 * ((x / 16 + y / 16) % 2) as f32;
                [bg[0] + grain, bg[1] + grain, bg[2] + grain]
            };
            for c in 0..3 {
                let val = base[c] * tint[c] + noise.sample(rng);
                img.set(c, y, x, val.clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Writes a learnable toy dataset (PNG images plus `train.csv`, `query.csv`,
/// `gallery.csv`) under `root`. Query and gallery images of an identity span
/// at least two cameras.
pub fn synth_dataset(root: &Path, cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.n_ids < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 identities, got {}", cfg.n_ids)));
    }
    if cfg.n_cams < 2 || cfg.n_views == 0 || cfg.imgs_per_id == 0 || cfg.image_size < 16 {
        return Err(Error::Config("synthetic data needs >= 2 cameras, >= 1 view, images and a size >= 16".into()));
    }
    if cfg.query_per_id == 0 || cfg.gallery_per_id < 2 {
        return Err(Error::Config("synthetic data needs >= 1 query and >= 2 gallery images per identity".into()));
    }
    let idents: Vec<Identity> = (0..cfg.n_ids).map(|i| Identity::new(i, cfg.n_ids)).collect();
    let mut out = Vec::new();
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let dir = root.join(split.as_str());
        fs::create_dir_all(&dir)?;
        let per_id = match split {
            Split::Train => cfg.imgs_per_id,
            Split::Query => cfg.query_per_id,
            Split::Gallery => cfg.gallery_per_id,
        };
        let mut records = Vec::new();
        for (id, ident) in idents.iter().enumerate() {
            for j in 0..per_id {
                let camera = match split {
                    Split::Train => j % cfg.n_cams,
                    Split::Query => (id + j) % cfg.n_cams,
                    Split::Gallery => (id + 1 + j) % cfg.n_cams,
                };
                let view = (j / cfg.n_cams + id + j) % cfg.n_views;
                let seed = cfg.seed ^ ((si as u64) << 48) ^ ((id as u64) << 24) ^ j as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let img = render(ident, camera, cfg.n_cams, view, cfg.image_size, &mut rng);
                let vehicle_id = id as u64 + 1;
                let image_id = format!("{vehicle_id:04}_c{:03}_{split}_{j:03}", camera + 1);
                let path = dir.join(format!("{image_id}.png"));
                img.to_rgb().save(&path)?;
                records.push(ImageRecord { image_id, path, vehicle_id, camera_id: camera, view_id: Some(view) });
            }
        }
        let manifest = DatasetManifest::new(split, records)?;
        write_csv(&manifest, &root.join(format!("{split}.csv")), root)?;
        out.push(manifest);
    }
    let gallery = out.pop().expect("three splits");
    let query = out.pop().expect("three splits");
    let train = out.pop().expect("three splits");
    Ok(SynthDataset { train, query, gallery })
}
