use std::path::Path;

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ImageNet channel statistics used by the pretrained backbone.
pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];

/// RGB image, channel-major, values in `[0, 1]` before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; 3 * width * height] }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn from_rgb(img: &image::RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Self::new(w, h);
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                out.set(c, y as usize, x as usize, p[c] as f32 / 255.0);
            }
        }
        out
    }

    pub fn to_rgb(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Subtracts the channel mean and divides by the channel std in place.
    pub fn normalize(&mut self) {
        let plane = self.width * self.height;
        for (c, ch) in self.data.chunks_mut(plane).enumerate() {
            ch.iter_mut().for_each(|v| *v = (*v - MEAN[c]) / STD[c]);
        }
    }
}

/// Decodes an image file and resizes it (bilinear) to `size x size`.
pub fn load_image(path: &Path, size: usize) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?
        .to_rgb8();
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(Image::from_rgb(&img))
}

/// Stacks equally sized images into an `(N, 3, H, W)` tensor.
pub fn to_batch(images: &[Image]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::Shape("empty image batch".into()))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * w * h);
    for im in images {
        if im.width != w || im.height != h {
            return Err(Error::Shape(format!("mixed image sizes {}x{} and {w}x{h}", im.width, im.height)));
        }
        data.extend_from_slice(&im.data);
    }
    Tensor::from_vec(&[images.len(), 3, h, w], data)
}
