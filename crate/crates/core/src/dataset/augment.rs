use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::{Image, MEAN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErasingConfig {
    pub probability: f64,
    /// Erased area as a fraction of the image, `[lo, hi)`.
    pub area: (f64, f64),
    /// Height / width ratio range of the erased box.
    pub aspect: (f64, f64),
    /// Fill value per channel in `[0, 1]` pixel units.
    pub fill: [f32; 3],
    pub attempts: usize,
}

impl Default for ErasingConfig {
    fn default() -> Self {
        Self { probability: 0.5, area: (0.02, 0.4), aspect: (0.3, 3.33), fill: MEAN, attempts: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub target_size: (usize, usize),
    pub pad: usize,
    pub hflip_prob: f64,
    pub random_erasing: Option<ErasingConfig>,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { target_size: (256, 256), pad: 10, hflip_prob: 0.5, random_erasing: Some(ErasingConfig::default()) }
    }
}

impl AugmentationConfig {
    pub fn disabled(target_size: (usize, usize)) -> Self {
        Self { target_size, pad: 0, hflip_prob: 0.0, random_erasing: None }
    }
}

/// Zero-pad, random crop back to size, horizontal flip, random erasing.
///
/// Random draws happen in this order: crop row, crop column (only with
/// padding), flip coin (only with a positive flip probability), erase coin,
/// then per attempt area fraction, aspect, top row and left column.
pub fn augment<R: Rng + ?Sized>(img: &Image, cfg: &AugmentationConfig, rng: &mut R) -> Image {
    let (w, h) = (img.width, img.height);
    debug_assert_eq!((w, h), cfg.target_size);
    let mut out = img.clone();
    if cfg.pad > 0 {
        let dy = rng.random_range(0..=2 * cfg.pad) as isize - cfg.pad as isize;
        let dx = rng.random_range(0..=2 * cfg.pad) as isize - cfg.pad as isize;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = (y as isize + dy, x as isize + dx);
                    let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                    out.set(c, y, x, if inside { img.get(c, sy as usize, sx as usize) } else { 0.0 });
                }
            }
        }
    }
    if cfg.hflip_prob > 0.0 && rng.random::<f64>() < cfg.hflip_prob {
        for c in 0..3 {
            for y in 0..h {
                let start = out.idx(c, y, 0);
                out.data[start..start + w].reverse();
            }
        }
    }
    if let Some(e) = &cfg.random_erasing {
        if rng.random::<f64>() < e.probability {
            erase(&mut out, e, rng);
        }
    }
    out
}

fn erase<R: Rng + ?Sized>(img: &mut Image, e: &ErasingConfig, rng: &mut R) {
    let (w, h) = (img.width, img.height);
    let total = (w * h) as f64;
    for _ in 0..e.attempts {
        let area = rng.random_range(e.area.0..e.area.1) * total;
        let aspect = rng.random_range(e.aspect.0..e.aspect.1);
        let eh = (area * aspect).sqrt().round() as usize;
        let ew = (area / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        for (c, &fill) in e.fill.iter().enumerate() {
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    img.set(c, y, x, fill);
                }
            }
        }
        return;
    }
}
