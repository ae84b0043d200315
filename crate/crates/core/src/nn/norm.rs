use super::param::{ParamId, ParamStore, Scope};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const EPS: f64 = 1e-5;
const MOMENTUM: f32 = 0.1;

#[derive(Debug)]
struct NormCache {
    x_hat: Tensor,
    inv_std: Vec<f32>,
}

/// Batch normalization over `(N, H, W)` per channel. Also used on `(N, C)`
/// embeddings by viewing them as `(N, C, 1, 1)`.
#[derive(Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    cache: Option<NormCache>,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, scope: &Scope, channels: usize) -> Self {
        let g = scope.group;
        Self {
            channels,
            weight: store.param(scope.name("weight"), &[channels], vec![1.0; channels], g),
            bias: store.param(scope.name("bias"), &[channels], vec![0.0; channels], g),
            running_mean: store.buffer(scope.name("running_mean"), &[channels], vec![0.0; channels], g),
            running_var: store.buffer(scope.name("running_var"), &[channels], vec![1.0; channels], g),
            cache: None,
        }
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }

    fn check(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("batch norm expects {} channels, got {c}", self.channels)));
        }
        Ok((n, c, h * w))
    }

    /// Inference: normalizes with the running statistics.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (n, c, hw) = self.check(x)?;
        let (gamma, beta) = (store.value(self.weight), store.value(self.bias));
        let (mean, var) = (store.value(self.running_mean), store.value(self.running_var));
        let mut y = x.clone();
        for ch in 0..c {
            let scale = gamma[ch] / ((var[ch] as f64 + EPS).sqrt() as f32);
            let shift = beta[ch] - mean[ch] * scale;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                y.data_mut()[base..base + hw].iter_mut().for_each(|v| *v = *v * scale + shift);
            }
        }
        Ok(y)
    }

    /// Training: normalizes with batch statistics and updates the running ones.
    pub fn forward_train(&mut self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let (n, c, hw) = self.check(x)?;
        let count = n * hw;
        if count < 2 {
            return Err(Error::Shape("batch norm needs more than one value per channel".into()));
        }
        let mut x_hat = x.clone();
        let mut inv_std = vec![0.0f32; c];
        let mut means = vec![0.0f32; c];
        let mut vars = vec![0.0f32; c];
        for ch in 0..c {
            let (mut s, mut ss) = (0.0f64, 0.0f64);
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for &v in &x.data()[base..base + hw] {
                    s += v as f64;
                    ss += (v as f64) * (v as f64);
                }
            }
            let mean = s / count as f64;
            let var = (ss / count as f64 - mean * mean).max(0.0);
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[ch] = istd as f32;
            means[ch] = mean as f32;
            vars[ch] = (var * count as f64 / (count - 1) as f64) as f32;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                x_hat.data_mut()[base..base + hw]
                    .iter_mut()
                    .for_each(|v| *v = ((*v as f64 - mean) * istd) as f32);
            }
        }
        {
            let rm = store.value_mut(self.running_mean);
            for (r, m) in rm.iter_mut().zip(&means) {
                *r = (1.0 - MOMENTUM) * *r + MOMENTUM * m;
            }
            let rv = store.value_mut(self.running_var);
            for (r, v) in rv.iter_mut().zip(&vars) {
                *r = (1.0 - MOMENTUM) * *r + MOMENTUM * v;
            }
        }
        let y = affine(&x_hat, store.value(self.weight), store.value(self.bias), n, c, hw);
        self.cache = Some(NormCache { x_hat, inv_std });
        Ok(y)
    }

    pub fn backward(&mut self, store: &mut ParamStore, dy: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("batch norm backward without cached forward".into()))?;
        let (n, c, hw) = self.check(dy)?;
        let count = (n * hw) as f64;
        let gamma = store.value(self.weight).to_vec();
        let mut dx = Tensor::zeros(dy.shape());
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        for ch in 0..c {
            let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for (g, xh) in dy.data()[base..base + hw].iter().zip(&cache.x_hat.data()[base..base + hw]) {
                    sdy += *g as f64;
                    sdyx += (*g as f64) * (*xh as f64);
                }
            }
            dgamma[ch] = sdyx as f32;
            dbeta[ch] = sdy as f32;
            let k = gamma[ch] as f64 * cache.inv_std[ch] as f64 / count;
            for i in 0..n {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let g = dy.data()[j] as f64;
                    let xh = cache.x_hat.data()[j] as f64;
                    dx.data_mut()[j] = (k * (count * g - sdy - xh * sdyx)) as f32;
                }
            }
        }
        add_into(store.grad_mut(self.weight), &dgamma);
        add_into(store.grad_mut(self.bias), &dbeta);
        Ok(dx)
    }
}

/// Instance normalization with a learned affine transform and no running
/// statistics (PyTorch `InstanceNorm2d(affine=True)`).
#[derive(Debug)]
pub struct InstanceNorm2d {
    pub channels: usize,
    pub weight: ParamId,
    pub bias: ParamId,
    cache: Option<NormCache>,
}

impl InstanceNorm2d {
    pub fn new(store: &mut ParamStore, scope: &Scope, channels: usize) -> Self {
        let g = scope.group;
        Self {
            channels,
            weight: store.param(scope.name("weight"), &[channels], vec![1.0; channels], g),
            bias: store.param(scope.name("bias"), &[channels], vec![0.0; channels], g),
            cache: None,
        }
    }

    fn normalize(&self, x: &Tensor) -> Result<(Tensor, Vec<f32>)> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.channels {
            return Err(Error::Shape(format!("instance norm expects {} channels, got {c}", self.channels)));
        }
        let hw = h * w;
        let mut x_hat = x.clone();
        let mut inv_std = vec![0.0f32; n * c];
        for (plane, istd_out) in x_hat.data_mut().chunks_mut(hw).zip(inv_std.iter_mut()) {
            let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64;
            let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / hw as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            *istd_out = istd as f32;
            plane.iter_mut().for_each(|v| *v = ((*v as f64 - mean) * istd) as f32);
        }
        Ok((x_hat, inv_std))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (x_hat, _) = self.normalize(x)?;
        let (n, c, h, w) = x.dims4()?;
        Ok(affine(&x_hat, store.value(self.weight), store.value(self.bias), n, c, h * w))
    }

    pub fn forward_train(&mut self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (x_hat, inv_std) = self.normalize(x)?;
        let (n, c, h, w) = x.dims4()?;
        let y = affine(&x_hat, store.value(self.weight), store.value(self.bias), n, c, h * w);
        self.cache = Some(NormCache { x_hat, inv_std });
        Ok(y)
    }

    pub fn backward(&mut self, store: &mut ParamStore, dy: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("instance norm backward without cached forward".into()))?;
        let (n, c, h, w) = dy.dims4()?;
        let hw = h * w;
        let gamma = store.value(self.weight).to_vec();
        let mut dx = Tensor::zeros(dy.shape());
        let mut dgamma = vec![0.0f32; c];
        let mut dbeta = vec![0.0f32; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                let g = &dy.data()[base..base + hw];
                let xh = &cache.x_hat.data()[base..base + hw];
                let sdy: f64 = g.iter().map(|&v| v as f64).sum();
                let sdyx: f64 = g.iter().zip(xh).map(|(a, b)| *a as f64 * *b as f64).sum();
                dgamma[ch] += sdyx as f32;
                dbeta[ch] += sdy as f32;
                let k = gamma[ch] as f64 * cache.inv_std[i * c + ch] as f64 / hw as f64;
                for j in 0..hw {
                    dx.data_mut()[base + j] = (k * (hw as f64 * g[j] as f64 - sdy - xh[j] as f64 * sdyx)) as f32;
                }
            }
        }
        add_into(store.grad_mut(self.weight), &dgamma);
        add_into(store.grad_mut(self.bias), &dbeta);
        Ok(dx)
    }
}

/// IBN-a normalization: instance norm on the first half of the channels,
/// batch norm on the rest.
#[derive(Debug)]
pub struct Ibn {
    pub half: usize,
    pub instance: InstanceNorm2d,
    pub batch: BatchNorm2d,
}

impl Ibn {
    pub fn new(store: &mut ParamStore, scope: &Scope, channels: usize) -> Self {
        let half = channels / 2;
        Self {
            half,
            instance: InstanceNorm2d::new(store, &scope.sub("IN"), half),
            batch: BatchNorm2d::new(store, &scope.sub("BN"), channels - half),
        }
    }

    fn join(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, _, h, w) = a.dims4()?;
        let mut out = Tensor::zeros(&[n, self.half + self.batch.channels, h, w]);
        out.add_channel_slice(0, a)?;
        out.add_channel_slice(self.half, b)?;
        Ok(out)
    }

    fn split(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let c = self.half + self.batch.channels;
        Ok((x.channel_slice(0, self.half)?, x.channel_slice(self.half, c)?))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (a, b) = self.split(x)?;
        self.join(&self.instance.forward(store, &a)?, &self.batch.forward(store, &b)?)
    }

    pub fn forward_train(&mut self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let (a, b) = self.split(x)?;
        let ya = self.instance.forward_train(store, &a)?;
        let yb = self.batch.forward_train(store, &b)?;
        self.join(&ya, &yb)
    }

    pub fn backward(&mut self, store: &mut ParamStore, dy: &Tensor) -> Result<Tensor> {
        let (da, db) = self.split(dy)?;
        let ga = self.instance.backward(store, &da)?;
        let gb = self.batch.backward(store, &db)?;
        self.join(&ga, &gb)
    }
}

/// Normalization slot of a bottleneck's first convolution.
#[derive(Debug)]
pub enum Norm {
    Batch(BatchNorm2d),
    Ibn(Ibn),
}

impl Norm {
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        match self {
            Norm::Batch(n) => n.forward(store, x),
            Norm::Ibn(n) => n.forward(store, x),
        }
    }

    pub fn forward_train(&mut self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        match self {
            Norm::Batch(n) => n.forward_train(store, x),
            Norm::Ibn(n) => n.forward_train(store, x),
        }
    }

    pub fn backward(&mut self, store: &mut ParamStore, dy: &Tensor) -> Result<Tensor> {
        match self {
            Norm::Batch(n) => n.backward(store, dy),
            Norm::Ibn(n) => n.backward(store, dy),
        }
    }
}

fn affine(x_hat: &Tensor, gamma: &[f32], beta: &[f32], n: usize, c: usize, hw: usize) -> Tensor {
    let mut y = x_hat.clone();
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * hw;
            let (g, b) = (gamma[ch], beta[ch]);
            y.data_mut()[base..base + hw].iter_mut().for_each(|v| *v = *v * g + b);
        }
    }
    y
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
