use rand::Rng;
use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore, Scope};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride, pad, groups: 1, bias: false }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::Shape(format!(
                "groups={} must divide in_channels={} and out_channels={}",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::Shape("kernel and stride must be positive".into()));
        }
        Ok(())
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * (self.in_channels / self.groups) * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let eh = h + 2 * self.pad;
        let ew = w + 2 * self.pad;
        if eh < self.kernel || ew < self.kernel {
            return Err(Error::Shape(format!("input {h}x{w} too small for kernel {}", self.kernel)));
        }
        Ok(((eh - self.kernel) / self.stride + 1, (ew - self.kernel) / self.stride + 1))
    }

    /// Multiply-accumulates for one image of spatial size `h x w`.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (oh, ow) = self.out_hw(h, w)?;
        Ok((oh * ow) as u64 * self.weight_len() as u64)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

/// 2-D convolution with optional channel groups, computed as im2col + GEMM
/// per image and group.
#[derive(Debug)]
pub struct Conv2d {
    pub cfg: ConvConfig,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    cache: Option<Tensor>,
}

impl Conv2d {
    /// Kaiming-normal (fan-out) init, the torchvision ResNet convention.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, scope: &Scope, cfg: ConvConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let fan_out = cfg.out_channels * cfg.kernel * cfg.kernel;
        let std = (2.0 / fan_out as f32).sqrt();
        let shape = [cfg.out_channels, cfg.in_channels / cfg.groups, cfg.kernel, cfg.kernel];
        let w = Tensor::randn(&shape, std, rng).into_data();
        Ok(Self::with_weights(store, scope, cfg, w, cfg.bias.then(|| vec![0.0; cfg.out_channels])))
    }

    /// PyTorch's default uniform(±1/sqrt(fan_in)) init for weight and bias.
    pub fn new_default_init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        scope: &Scope,
        cfg: ConvConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let fan_in = (cfg.in_channels / cfg.groups) * cfg.kernel * cfg.kernel;
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w = (0..cfg.weight_len()).map(|_| rng.random_range(-bound..bound)).collect();
        let b = cfg
            .bias
            .then(|| (0..cfg.out_channels).map(|_| rng.random_range(-bound..bound)).collect());
        Ok(Self::with_weights(store, scope, cfg, w, b))
    }

    pub fn with_weights(
        store: &mut ParamStore,
        scope: &Scope,
        cfg: ConvConfig,
        weight: Vec<f32>,
        bias: Option<Vec<f32>>,
    ) -> Self {
        let shape = [cfg.out_channels, cfg.in_channels / cfg.groups, cfg.kernel, cfg.kernel];
        let weight = store.param(scope.name("weight"), &shape, weight, scope.group);
        let bias = bias.map(|b| store.param(scope.name("bias"), &[cfg.out_channels], b, scope.group));
        Self { cfg, weight, bias, cache: None }
    }

    pub fn cached_input(&self) -> Option<&Tensor> {
        self.cache.as_ref()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let cfg = &self.cfg;
        let (n, c, h, w) = x.dims4()?;
        if c != cfg.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                cfg.in_channels
            )));
        }
        let (oh, ow) = cfg.out_hw(h, w)?;
        let g = cfg.groups;
        let (icg, ocg) = (cfg.in_channels / g, cfg.out_channels / g);
        let kdim = icg * cfg.kernel * cfg.kernel;
        let (ihw, ohw) = (h * w, oh * ow);
        let weight = store.value(self.weight);
        let mut y = Tensor::zeros(&[n, cfg.out_channels, oh, ow]);
        let mut cols = if cfg.is_pointwise() { Vec::new() } else { vec![0.0; kdim * ohw] };
        for i in 0..n {
            for gi in 0..g {
                let xin = &x.data()[(i * c + gi * icg) * ihw..(i * c + (gi + 1) * icg) * ihw];
                let b: &[f32] = if cfg.is_pointwise() {
                    xin
                } else {
                    im2col(xin, icg, h, w, cfg, oh, ow, &mut cols);
                    &cols
                };
                let wg = &weight[gi * ocg * kdim..(gi + 1) * ocg * kdim];
                let base = (i * cfg.out_channels + gi * ocg) * ohw;
                let yg = &mut y.data_mut()[base..base + ocg * ohw];
                gemm(ocg, ohw, kdim, 1.0, wg, false, b, false, 0.0, yg);
            }
        }
        if let Some(bid) = self.bias {
            let bias = store.value(bid);
            for i in 0..n {
                for (oc, bv) in bias.iter().enumerate() {
                    let base = (i * cfg.out_channels + oc) * ohw;
                    y.data_mut()[base..base + ohw].iter_mut().for_each(|v| *v += bv);
                }
            }
        }
        Ok(y)
    }

    pub fn forward_train(&mut self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(store, x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    /// Accumulates weight gradients and returns the input gradient.
    pub fn backward(&mut self, store: &mut ParamStore, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("conv backward without cached forward".into()))?;
        self.backward_with_input(store, &x, dy)
    }

    /// Backward pass against an input the caller kept alive itself.
    pub fn backward_with_input(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) -> Result<Tensor> {
        let cfg = self.cfg;
        let (n, c, h, w) = x.dims4()?;
        let (oh, ow) = cfg.out_hw(h, w)?;
        if dy.shape() != [n, cfg.out_channels, oh, ow] {
            return Err(Error::Shape(format!("conv grad shape {:?}", dy.shape())));
        }
        let g = cfg.groups;
        let (icg, ocg) = (cfg.in_channels / g, cfg.out_channels / g);
        let kdim = icg * cfg.kernel * cfg.kernel;
        let (ihw, ohw) = (h * w, oh * ow);
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let pointwise = cfg.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; kdim * ohw] };
        let mut dcols = if pointwise { Vec::new() } else { vec![0.0; kdim * ohw] };
        {
            let (weight, wgrad) = store.value_and_grad(self.weight);
            for i in 0..n {
                for gi in 0..g {
                    let xr = (i * c + gi * icg) * ihw..(i * c + (gi + 1) * icg) * ihw;
                    let xin = &x.data()[xr.clone()];
                    let dyr = (i * cfg.out_channels + gi * ocg) * ohw;
                    let dyg = &dy.data()[dyr..dyr + ocg * ohw];
                    let wr = gi * ocg * kdim..(gi + 1) * ocg * kdim;
                    if pointwise {
                        gemm(ocg, kdim, ohw, 1.0, dyg, false, xin, true, 1.0, &mut wgrad[wr.clone()]);
                        let dxg = &mut dx.data_mut()[xr];
                        gemm(kdim, ohw, ocg, 1.0, &weight[wr], true, dyg, false, 0.0, dxg);
                    } else {
                        im2col(xin, icg, h, w, &cfg, oh, ow, &mut cols);
                        gemm(ocg, kdim, ohw, 1.0, dyg, false, &cols, true, 1.0, &mut wgrad[wr.clone()]);
                        gemm(kdim, ohw, ocg, 1.0, &weight[wr], true, dyg, false, 0.0, &mut dcols);
                        col2im(&dcols, icg, h, w, &cfg, oh, ow, &mut dx.data_mut()[xr]);
                    }
                }
            }
        }
        if let Some(bid) = self.bias {
            let bgrad = store.grad_mut(bid);
            for i in 0..n {
                for (oc, bg) in bgrad.iter_mut().enumerate() {
                    let base = (i * cfg.out_channels + oc) * ohw;
                    *bg += dy.data()[base..base + ohw].iter().sum::<f32>();
                }
            }
        }
        Ok(dx)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], channels: usize, h: usize, w: usize, cfg: &ConvConfig, oh: usize, ow: usize, cols: &mut [f32]) {
    let k = cfg.kernel;
    let (s, p) = (cfg.stride as isize, cfg.pad as isize);
    let ohw = oh * ow;
    for ch in 0..channels {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * ohw;
                let dst = &mut cols[row..row + ohw];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ky as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        drow.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = ox as isize * s - p + kx as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], channels: usize, h: usize, w: usize, cfg: &ConvConfig, oh: usize, ow: usize, dx: &mut [f32]) {
    let k = cfg.kernel;
    let (s, p) = (cfg.stride as isize, cfg.pad as isize);
    let ohw = oh * ow;
    for ch in 0..channels {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * ohw;
                let src = &cols[row..row + ohw];
                for oy in 0..oh {
                    let iy = oy as isize * s - p + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = ox as isize * s - p + kx as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}
