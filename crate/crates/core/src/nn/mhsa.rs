use rand::Rng;

use super::conv::{Conv2d, ConvConfig};
use super::param::{ParamId, ParamStore, Scope};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MhsaConfig {
    pub channels: usize,
    pub heads: usize,
    /// Independent attention groups; group `g` sees only its channel slice.
    pub groups: usize,
    pub height: usize,
    pub width: usize,
}

impl MhsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.heads == 0 || self.channels % (self.groups * self.heads) != 0 {
            return Err(Error::Shape(format!(
                "channels={} not divisible into groups={} x heads={}",
                self.channels, self.groups, self.heads
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Shape("attention map must be non-empty".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.channels / (self.groups * self.heads)
    }

    fn projection(&self) -> ConvConfig {
        ConvConfig::new(self.channels, self.channels, 1, 1, 0)
            .groups(self.groups)
            .bias(true)
    }

    pub fn param_count(&self) -> usize {
        3 * self.projection().param_count() + self.channels * (2 * self.height - 1 + 2 * self.width - 1)
    }

    /// Projections, content logits, relative logits and the value mix.
    pub fn macs(&self) -> u64 {
        let n = (self.height * self.width) as u64;
        let c = self.channels as u64;
        let rel = (2 * self.height - 1 + 2 * self.width - 1) as u64;
        3 * n * self.projection().weight_len() as u64 + 2 * n * n * c + n * rel * c
    }
}

#[derive(Debug)]
struct MhsaCache {
    x: Tensor,
    q: Tensor,
    k: Tensor,
    v: Tensor,
    attn: Vec<f32>,
}

/// All-to-all multi-head self-attention over a 2-D map with relative
/// position logits split into height and width terms, as in BoTNet.
#[derive(Debug)]
pub struct Mhsa {
    pub cfg: MhsaConfig,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    /// `[groups, heads, 2H-1, d]`
    pub rel_h: ParamId,
    /// `[groups, heads, 2W-1, d]`
    pub rel_w: ParamId,
    cache: Option<MhsaCache>,
}

impl Mhsa {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, scope: &Scope, cfg: MhsaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let proj = cfg.projection();
        let query = Conv2d::new_default_init(store, &scope.sub("query"), proj, rng)?;
        let key = Conv2d::new_default_init(store, &scope.sub("key"), proj, rng)?;
        let value = Conv2d::new_default_init(store, &scope.sub("value"), proj, rng)?;
        let d = cfg.head_dim();
        let std = (d as f32).powf(-0.5);
        let hshape = [cfg.groups, cfg.heads, 2 * cfg.height - 1, d];
        let wshape = [cfg.groups, cfg.heads, 2 * cfg.width - 1, d];
        let rel_h = store.param(scope.name("rel_h"), &hshape, Tensor::randn(&hshape, std, rng).into_data(), scope.group);
        let rel_w = store.param(scope.name("rel_w"), &wshape, Tensor::randn(&wshape, std, rng).into_data(), scope.group);
        Ok(Self { cfg, query, key, value, rel_h, rel_w, cache: None })
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        let (n, c, h, w) = x.dims4()?;
        if c != self.cfg.channels || h != self.cfg.height || w != self.cfg.width {
            return Err(Error::Shape(format!(
                "attention built for {}x{}x{}, got {c}x{h}x{w}",
                self.cfg.channels, self.cfg.height, self.cfg.width
            )));
        }
        Ok(n)
    }

    fn scale(&self) -> f32 {
        (self.cfg.head_dim() as f32).powf(-0.5)
    }

    /// Runs attention; returns the output and, when asked, every attention
    /// matrix in `(image, group, head)` order.
    fn attend(&self, store: &ParamStore, q: &Tensor, k: &Tensor, v: &Tensor, keep: bool) -> (Tensor, Vec<f32>) {
        let cfg = self.cfg;
        let (n, c, h, w) = q.dims4().expect("checked");
        let npos = h * w;
        let d = cfg.head_dim();
        let (rh_len, rw_len) = (2 * h - 1, 2 * w - 1);
        let rel_h = store.value(self.rel_h);
        let rel_w = store.value(self.rel_w);
        let mut out = Tensor::zeros(q.shape());
        let mut kept = if keep { Vec::with_capacity(n * cfg.groups * cfg.heads * npos * npos) } else { Vec::new() };
        let mut logits = vec![0.0f32; npos * npos];
        let mut lh = vec![0.0f32; npos * rh_len];
        let mut lw = vec![0.0f32; npos * rw_len];
        for i in 0..n {
            for g in 0..cfg.groups {
                for hd in 0..cfg.heads {
                    let head = g * cfg.heads + hd;
                    let off = (i * c + head * d) * npos;
                    let (qh, kh, vh) = (&q.data()[off..off + d * npos], &k.data()[off..off + d * npos], &v.data()[off..off + d * npos]);
                    let rh = &rel_h[head * rh_len * d..(head + 1) * rh_len * d];
                    let rw = &rel_w[head * rw_len * d..(head + 1) * rw_len * d];
                    gemm(npos, npos, d, 1.0, qh, true, kh, false, 0.0, &mut logits);
                    gemm(npos, rh_len, d, 1.0, qh, true, rh, true, 0.0, &mut lh);
                    gemm(npos, rw_len, d, 1.0, qh, true, rw, true, 0.0, &mut lw);
                    for p in 0..npos {
                        let (py, px) = (p / w, p % w);
                        let row = &mut logits[p * npos..(p + 1) * npos];
                        for (j, l) in row.iter_mut().enumerate() {
                            let (jy, jx) = (j / w, j % w);
                            *l += lh[p * rh_len + jy + h - 1 - py] + lw[p * rw_len + jx + w - 1 - px];
                        }
                        softmax_inplace(row);
                    }
                    let o = &mut out.data_mut()[off..off + d * npos];
                    gemm(d, npos, npos, 1.0, vh, false, &logits, true, 0.0, o);
                    if keep {
                        kept.extend_from_slice(&logits);
                    }
                }
            }
        }
        (out, kept)
    }

    fn project(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let mut q = self.query.forward(store, x)?;
        let s = self.scale();
        q.data_mut().iter_mut().for_each(|v| *v *= s);
        Ok((q, self.key.forward(store, x)?, self.value.forward(store, x)?))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (q, k, v) = self.project(store, x)?;
        Ok(self.attend(store, &q, &k, &v, false).0)
    }

    pub fn forward_train(&mut self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let (q, k, v) = self.project(store, x)?;
        let (out, attn) = self.attend(store, &q, &k, &v, true);
        self.cache = Some(MhsaCache { x: x.clone(), q, k, v, attn });
        Ok(out)
    }

    pub fn cached_input(&self) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.x)
    }

    pub fn backward(&mut self, store: &mut ParamStore, dy: &Tensor) -> Result<Tensor> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("attention backward without cached forward".into()))?;
        let cfg = self.cfg;
        let n = self.check(dy)?;
        let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
        let npos = h * w;
        let d = cfg.head_dim();
        let (rh_len, rw_len) = (2 * h - 1, 2 * w - 1);
        let mut dq = Tensor::zeros(dy.shape());
        let mut dk = Tensor::zeros(dy.shape());
        let mut dv = Tensor::zeros(dy.shape());
        let mut drel_h = vec![0.0f32; store.value(self.rel_h).len()];
        let mut drel_w = vec![0.0f32; store.value(self.rel_w).len()];
        let mut da = vec![0.0f32; npos * npos];
        let mut gh = vec![0.0f32; npos * rh_len];
        let mut gw = vec![0.0f32; npos * rw_len];
        {
            let rel_h = store.value(self.rel_h);
            let rel_w = store.value(self.rel_w);
            for i in 0..n {
                for g in 0..cfg.groups {
                    for hd in 0..cfg.heads {
                        let head = g * cfg.heads + hd;
                        let off = (i * c + head * d) * npos;
                        let span = off..off + d * npos;
                        let a_idx = (i * cfg.groups + g) * cfg.heads + hd;
                        let attn = &cache.attn[a_idx * npos * npos..(a_idx + 1) * npos * npos];
                        let dout = &dy.data()[span.clone()];
                        let (qh, kh, vh) = (&cache.q.data()[span.clone()], &cache.k.data()[span.clone()], &cache.v.data()[span.clone()]);
                        gemm(npos, npos, d, 1.0, dout, true, vh, false, 0.0, &mut da);
                        gemm(d, npos, npos, 1.0, dout, false, attn, false, 0.0, &mut dv.data_mut()[span.clone()]);
                        // softmax backward, in place: da <- A * (da - <da, A>_row)
                        for p in 0..npos {
                            let arow = &attn[p * npos..(p + 1) * npos];
                            let drow = &mut da[p * npos..(p + 1) * npos];
                            let dot: f32 = arow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                            for (dl, a) in drow.iter_mut().zip(arow) {
                                *dl = a * (*dl - dot);
                            }
                        }
                        gh.iter_mut().for_each(|v| *v = 0.0);
                        gw.iter_mut().for_each(|v| *v = 0.0);
                        for p in 0..npos {
                            let (py, px) = (p / w, p % w);
                            for j in 0..npos {
                                let (jy, jx) = (j / w, j % w);
                                let dl = da[p * npos + j];
                                gh[p * rh_len + jy + h - 1 - py] += dl;
                                gw[p * rw_len + jx + w - 1 - px] += dl;
                            }
                        }
                        let rh = &rel_h[head * rh_len * d..(head + 1) * rh_len * d];
                        let rw = &rel_w[head * rw_len * d..(head + 1) * rw_len * d];
                        let dqh = &mut dq.data_mut()[span.clone()];
                        gemm(d, npos, npos, 1.0, kh, false, &da, true, 0.0, dqh);
                        gemm(d, npos, rh_len, 1.0, rh, true, &gh, true, 1.0, dqh);
                        gemm(d, npos, rw_len, 1.0, rw, true, &gw, true, 1.0, dqh);
                        gemm(d, npos, npos, 1.0, qh, false, &da, false, 0.0, &mut dk.data_mut()[span]);
                        gemm(rh_len, d, npos, 1.0, &gh, true, qh, true, 1.0, &mut drel_h[head * rh_len * d..(head + 1) * rh_len * d]);
                        gemm(rw_len, d, npos, 1.0, &gw, true, qh, true, 1.0, &mut drel_w[head * rw_len * d..(head + 1) * rw_len * d]);
                    }
                }
            }
        }
        for (gacc, v) in store.grad_mut(self.rel_h).iter_mut().zip(&drel_h) {
            *gacc += v;
        }
        for (gacc, v) in store.grad_mut(self.rel_w).iter_mut().zip(&drel_w) {
            *gacc += v;
        }
        let s = self.scale();
        dq.data_mut().iter_mut().for_each(|v| *v *= s);
        let mut dx = self.query.backward_with_input(store, &cache.x, &dq)?;
        let dxk = self.key.backward_with_input(store, &cache.x, &dk)?;
        let dxv = self.value.backward_with_input(store, &cache.x, &dv)?;
        for ((a, b), c) in dx.data_mut().iter_mut().zip(dxk.data()).zip(dxv.data()) {
            *a += b + c;
        }
        Ok(dx)
    }
}

fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::ParamGroup;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: MhsaConfig, seed: u64) -> (ParamStore, Mhsa) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let m = Mhsa::new(&mut store, &Scope::new("mhsa", ParamGroup::Branch(0)), cfg, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn zero_logits_and_identity_values_give_uniform_average() {
        let cfg = MhsaConfig { channels: 4, heads: 2, groups: 1, height: 2, width: 2 };
        let (mut store, m) = build(cfg, 0);
        for id in [m.query.weight, m.key.weight, m.query.bias.unwrap(), m.key.bias.unwrap(), m.value.bias.unwrap(), m.rel_h, m.rel_w] {
            store.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
        }
        let wv = store.value_mut(m.value.weight);
        wv.iter_mut().for_each(|v| *v = 0.0);
        for ch in 0..4 {
            wv[ch * 4 + ch] = 1.0;
        }
        let x = Tensor::from_vec(&[1, 4, 2, 2], (0..16).map(|v| v as f32).collect()).unwrap();
        let y = m.forward(&store, &x).unwrap();
        // every position sees the mean over the four positions of its channel
        for ch in 0..4 {
            let mean = (0..4).map(|p| (ch * 4 + p) as f32).sum::<f32>() / 4.0;
            for p in 0..4 {
                assert!((y.data()[ch * 4 + p] - mean).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn batch_order_is_respected() {
        let cfg = MhsaConfig { channels: 8, heads: 2, groups: 2, height: 3, width: 2 };
        let (store, m) = build(cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn(&[2, 8, 3, 2], 1.0, &mut rng);
        let y = m.forward(&store, &x).unwrap();
        let mut swapped = x.data()[48..].to_vec();
        swapped.extend_from_slice(&x.data()[..48]);
        let ys = m.forward(&store, &Tensor::from_vec(&[2, 8, 3, 2], swapped).unwrap()).unwrap();
        assert_eq!(&y.data()[..48], &ys.data()[48..]);
        assert_eq!(&y.data()[48..], &ys.data()[..48]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = MhsaConfig { channels: 8, heads: 2, groups: 2, height: 3, width: 2 };
        let (mut store, mut m) = build(cfg, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::randn(&[2, 8, 3, 2], 1.0, &mut rng);
        let r = Tensor::randn(&[2, 8, 3, 2], 1.0, &mut rng);
        m.forward_train(&store, &x).unwrap();
        let dx = m.backward(&mut store, &r).unwrap();
        let loss = |m: &Mhsa, s: &ParamStore, x: &Tensor| -> f64 {
            m.forward(s, x).unwrap().data().iter().zip(r.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let eps = 1e-2f32;
        for idx in [0usize, 13, 50, 95] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= eps;
            let fd = (loss(&m, &store, &xp) - loss(&m, &store, &xm)) / (2.0 * eps as f64);
            assert!((fd - dx.data()[idx] as f64).abs() < 5e-3, "dx[{idx}] {fd} vs {}", dx.data()[idx]);
        }
        for id in [m.rel_h, m.rel_w, m.query.weight, m.key.weight, m.value.bias.unwrap()] {
            let grad = store.slot(id).grad.clone();
            for idx in [0usize, grad.len() / 2, grad.len() - 1] {
                let orig = store.value(id)[idx];
                store.value_mut(id)[idx] = orig + eps;
                let lp = loss(&m, &store, &x);
                store.value_mut(id)[idx] = orig - eps;
                let lm = loss(&m, &store, &x);
                store.value_mut(id)[idx] = orig;
                let fd = (lp - lm) / (2.0 * eps as f64);
                assert!((fd - grad[idx] as f64).abs() < 5e-3, "{}[{idx}] {fd} vs {}", store.slot(id).name, grad[idx]);
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = MhsaConfig { channels: 6, heads: 4, groups: 1, height: 2, width: 2 };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Mhsa::new(&mut store, &Scope::new("m", ParamGroup::Branch(0)), cfg, &mut rng).is_err());
    }
}
