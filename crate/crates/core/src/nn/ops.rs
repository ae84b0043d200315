//! Parameter-free layers: ReLU, max pooling and global average pooling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn relu_inplace(x: &mut Tensor) {
    x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` where the activation output was not positive.
pub fn relu_backward(dy: &mut Tensor, out: &Tensor) {
    for (g, &y) in dy.data_mut().iter_mut().zip(out.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// 3x3 / stride 2 / pad 1 max pooling, the ResNet stem pool.
#[derive(Debug, Default)]
pub struct MaxPool {
    cache: Option<(Vec<usize>, [usize; 4])>,
}

impl MaxPool {
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;
    pub const PAD: usize = 1;

    pub fn out_hw(h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * Self::PAD - Self::KERNEL) / Self::STRIDE + 1,
            (w + 2 * Self::PAD - Self::KERNEL) / Self::STRIDE + 1,
        )
    }

    fn run(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = Self::out_hw(h, w);
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let mut arg = vec![0usize; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &x.data()[plane * h * w..(plane + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = 0;
                    for ky in 0..Self::KERNEL {
                        let iy = (oy * Self::STRIDE + ky) as isize - Self::PAD as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..Self::KERNEL {
                            let ix = (ox * Self::STRIDE + kx) as isize - Self::PAD as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if src[idx] > best {
                                best = src[idx];
                                best_i = idx;
                            }
                        }
                    }
                    let o = (plane * oh + oy) * ow + ox;
                    y.data_mut()[o] = best;
                    arg[o] = plane * h * w + best_i;
                }
            }
        }
        Ok((y, arg))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(Self::run(x)?.0)
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (y, arg) = Self::run(x)?;
        self.cache = Some((arg, [n, c, h, w]));
        Ok(y)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Result<Tensor> {
        let (arg, shape) = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("max pool backward without cached forward".into()))?;
        let mut dx = Tensor::zeros(&shape);
        for (g, &i) in dy.data().iter().zip(&arg) {
            dx.data_mut()[i] += g;
        }
        Ok(dx)
    }
}

/// Global average pooling `(N, C, H, W) -> (N, C)`.
pub fn gap(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let hw = (h * w) as f32;
    let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f32>() / hw).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn gap_backward(dy: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = dy.dims2()?;
    let hw = h * w;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        let v = g / hw as f32;
        plane.iter_mut().for_each(|d| *d = v);
    }
    Ok(dx)
}
