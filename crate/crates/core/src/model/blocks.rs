//! Bottleneck blocks, stage-4 branches and the shared stem + stages 1-3.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{relu_backward, relu_inplace};
use super::layers::{LayerKind, LayerRecord};
use crate::nn::{BatchNorm2d, Conv2d, ConvConfig, Ibn, MaxPool, Mhsa, MhsaConfig, Norm, ParamGroup, ParamStore, Scope};
use crate::tensor::{add_assign, Tensor};

/// Spatial mixer in the middle of a bottleneck.
#[derive(Debug)]
pub enum Mixer {
    Conv(Conv2d),
    Attention(Box<Mhsa>),
}

impl Mixer {
    fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        match self {
            Mixer::Conv(c) => c.forward(store, x),
            Mixer::Attention(a) => a.forward(store, x),
        }
    }

    fn forward_train(&mut self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        match self {
            Mixer::Conv(c) => c.forward_train(store, x),
            Mixer::Attention(a) => a.forward_train(store, x),
        }
    }

    fn cached_input(&self) -> Option<&Tensor> {
        match self {
            Mixer::Conv(c) => c.cached_input(),
            Mixer::Attention(a) => a.cached_input(),
        }
    }

    fn backward(&mut self, store: &mut ParamStore, dy: &Tensor) -> Result<Tensor> {
        match self {
            Mixer::Conv(c) => c.backward(store, dy),
            Mixer::Attention(a) => a.backward(store, dy),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BottleneckConfig {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub groups: usize,
    pub ibn: bool,
    /// `Some((heads, h, w))` replaces the 3x3 conv with self-attention.
    pub attention: Option<(usize, usize, usize)>,
}

/// ResNet v1.5 bottleneck (stride on the 3x3 conv) with optional grouping,
/// IBN-a first norm, or an attention mixer.
#[derive(Debug)]
pub struct Bottleneck {
    pub cfg: BottleneckConfig,
    conv1: Conv2d,
    bn1: Norm,
    conv2: Mixer,
    bn2: BatchNorm2d,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
    out_cache: Option<Tensor>,
}

impl Bottleneck {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, scope: &Scope, cfg: BottleneckConfig, rng: &mut R) -> Result<Self> {
        let g = cfg.groups;
        let conv1 = Conv2d::new(store, &scope.sub("conv1"), ConvConfig::new(cfg.in_channels, cfg.mid_channels, 1, 1, 0).groups(g), rng)?;
        let bn1 = if cfg.ibn {
            Norm::Ibn(Ibn::new(store, &scope.sub("bn1"), cfg.mid_channels))
        } else {
            Norm::Batch(BatchNorm2d::new(store, &scope.sub("bn1"), cfg.mid_channels))
        };
        let conv2 = match cfg.attention {
            None => Mixer::Conv(Conv2d::new(
                store,
                &scope.sub("conv2"),
                ConvConfig::new(cfg.mid_channels, cfg.mid_channels, 3, cfg.stride, 1).groups(g),
                rng,
            )?),
            Some((heads, h, w)) => {
                if cfg.stride != 1 {
                    return Err(Error::Config("attention blocks run at stride 1".into()));
                }
                let mcfg = MhsaConfig { channels: cfg.mid_channels, heads, groups: g, height: h, width: w };
                Mixer::Attention(Box::new(Mhsa::new(store, &scope.sub("conv2"), mcfg, rng)?))
            }
        };
        let bn2 = BatchNorm2d::new(store, &scope.sub("bn2"), cfg.mid_channels);
        let conv3 = Conv2d::new(store, &scope.sub("conv3"), ConvConfig::new(cfg.mid_channels, cfg.out_channels, 1, 1, 0).groups(g), rng)?;
        let bn3 = BatchNorm2d::new(store, &scope.sub("bn3"), cfg.out_channels);
        let downsample = if cfg.stride != 1 || cfg.in_channels != cfg.out_channels {
            let ds = scope.sub("downsample");
            let conv = Conv2d::new(store, &ds.sub("0"), ConvConfig::new(cfg.in_channels, cfg.out_channels, 1, cfg.stride, 0).groups(g), rng)?;
            Some((conv, BatchNorm2d::new(store, &ds.sub("1"), cfg.out_channels)))
        } else {
            None
        };
        Ok(Self { cfg, conv1, bn1, conv2, bn2, conv3, bn3, downsample, out_cache: None })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut a = self.bn1.forward(store, &self.conv1.forward(store, x)?)?;
        relu_inplace(&mut a);
        let mut b = self.bn2.forward(store, &self.conv2.forward(store, &a)?)?;
        relu_inplace(&mut b);
        let mut out = self.bn3.forward(store, &self.conv3.forward(store, &b)?)?;
        match &self.downsample {
            Some((c, bn)) => add_assign(out.data_mut(), bn.forward(store, &c.forward(store, x)?)?.data()),
            None => add_assign(out.data_mut(), x.data()),
        }
        relu_inplace(&mut out);
        Ok(out)
    }

    pub fn forward_train(&mut self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward_train(store, x)?;
        let mut a = self.bn1.forward_train(store, &h)?;
        relu_inplace(&mut a);
        let h = self.conv2.forward_train(store, &a)?;
        drop(a);
        let mut b = self.bn2.forward_train(store, &h)?;
        relu_inplace(&mut b);
        let h = self.conv3.forward_train(store, &b)?;
        drop(b);
        let mut out = self.bn3.forward_train(store, &h)?;
        match &mut self.downsample {
            Some((c, bn)) => {
                let s = c.forward_train(store, x)?;
                add_assign(out.data_mut(), bn.forward_train(store, &s)?.data());
            }
            None => add_assign(out.data_mut(), x.data()),
        }
        relu_inplace(&mut out);
        self.out_cache = Some(out.clone());
        Ok(out)
    }

    pub fn backward(&mut self, store: &mut ParamStore, dy: &Tensor) -> Result<Tensor> {
        let out = self
            .out_cache
            .take()
            .ok_or_else(|| Error::Shape("bottleneck backward without cached forward".into()))?;
        let mut d = dy.clone();
        relu_backward(&mut d, &out);
        drop(out);
        let mut dshort = match &mut self.downsample {
            Some((c, bn)) => {
                let t = bn.backward(store, &d)?;
                c.backward(store, &t)?
            }
            None => d.clone(),
        };
        let t = self.bn3.backward(store, &d)?;
        let mut t = {
            let relu_out = self.conv3.cached_input().cloned();
            let mut g = self.conv3.backward(store, &t)?;
            if let Some(y) = relu_out {
                relu_backward(&mut g, &y);
            }
            g
        };
        t = self.bn2.backward(store, &t)?;
        let relu_out = self.conv2.cached_input().cloned();
        let mut t = self.conv2.backward(store, &t)?;
        if let Some(y) = relu_out {
            relu_backward(&mut t, &y);
        }
        let t = self.bn1.backward(store, &t)?;
        let dx = self.conv1.backward(store, &t)?;
        add_assign(dshort.data_mut(), dx.data());
        Ok(dshort)
    }
}

/// A stack of bottlenecks; the first one handles stride and width change.
#[derive(Debug)]
pub struct Stage {
    pub blocks: Vec<Bottleneck>,
}

impl Stage {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        scope: &Scope,
        first: BottleneckConfig,
        n_blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let cfg = if i == 0 {
                first
            } else {
                BottleneckConfig { in_channels: first.out_channels, stride: 1, ..first }
            };
            blocks.push(Bottleneck::new(store, &scope.sub(i), cfg, rng)?);
        }
        Ok(Self { blocks })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &self.blocks {
            h = b.forward(store, &h)?;
        }
        Ok(h)
    }

    pub fn forward_train(&mut self, store: &mut ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward_train(store, &h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, store: &mut ParamStore, dy: &Tensor) -> Result<Tensor> {
        let mut d = dy.clone();
        for b in self.blocks.iter_mut().rev() {
            d = b.backward(store, &d)?;
        }
        Ok(d)
    }
}

/// Stem and stages 1-3 shared by all branches: `F_s123`.
#[derive(Debug)]
pub struct Trunk {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub pool: MaxPool,
    pub layers: Vec<Stage>,
    stem_cache: Option<Tensor>,
}

/// `(blocks, mid multiplier, stride)` for ResNet50 stages 1-3.
pub const TRUNK_LAYOUT: [(usize, usize, usize); 3] = [(3, 1, 1), (4, 2, 2), (6, 4, 2)];

impl Trunk {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, scope: &Scope, base: usize, ibn: bool, rng: &mut R) -> Result<Self> {
        let conv1 = Conv2d::new(store, &scope.sub("conv1"), ConvConfig::new(3, base, 7, 2, 3), rng)?;
        let bn1 = BatchNorm2d::new(store, &scope.sub("bn1"), base);
        let mut layers = Vec::new();
        let mut in_c = base;
        for (i, &(n, mult, stride)) in TRUNK_LAYOUT.iter().enumerate() {
            let mid = base * mult;
            let cfg = BottleneckConfig {
                in_channels: in_c,
                mid_channels: mid,
                out_channels: mid * 4,
                stride,
                groups: 1,
                ibn,
                attention: None,
            };
            layers.push(Stage::new(store, &scope.sub(format!("layer{}", i + 1)), cfg, n, rng)?);
            in_c = mid * 4;
        }
        Ok(Self { conv1, bn1, pool: MaxPool::default(), layers, stem_cache: None })
    }

    fn check(&self, x: &Tensor, input_size: usize) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h != input_size || w != input_size {
            return Err(Error::Shape(format!(
                "expected images of 3x{input_size}x{input_size}, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    /// `x: (N, 3, S, S)` to the stage-3 map `(N, 16 * base, S/16, S/16)`.
    pub fn forward(&self, store: &ParamStore, x: &Tensor, input_size: usize) -> Result<Tensor> {
        self.check(x, input_size)?;
        let mut h = self.bn1.forward(store, &self.conv1.forward(store, x)?)?;
        relu_inplace(&mut h);
        let mut h = self.pool.forward(&h)?;
        for l in &self.layers {
            h = l.forward(store, &h)?;
        }
        Ok(h)
    }

    pub fn forward_train(&mut self, store: &mut ParamStore, x: &Tensor, input_size: usize) -> Result<Tensor> {
        self.check(x, input_size)?;
        let h = self.conv1.forward_train(store, x)?;
        let mut h = self.bn1.forward_train(store, &h)?;
        relu_inplace(&mut h);
        let pooled = self.pool.forward_train(&h)?;
        self.stem_cache = Some(h);
        let mut h = pooled;
        for l in &mut self.layers {
            h = l.forward_train(store, &h)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, store: &mut ParamStore, dy: &Tensor) -> Result<()> {
        let mut d = dy.clone();
        for l in self.layers.iter_mut().rev() {
            d = l.backward(store, &d)?;
        }
        let mut d = self.pool.backward(&d)?;
        if let Some(y) = self.stem_cache.take() {
            relu_backward(&mut d, &y);
        }
        let d = self.bn1.backward(store, &d)?;
        self.conv1.backward(store, &d)?;
        Ok(())
    }
}

fn norm_records(norm: &Norm, name: String, group: ParamGroup, hw: (usize, usize), out: &mut Vec<LayerRecord>) {
    match norm {
        Norm::Batch(bn) => out.push(LayerRecord::new(name, group, LayerKind::BatchNorm { channels: bn.channels }, hw)),
        Norm::Ibn(ibn) => {
            let kind = LayerKind::InstanceNorm { channels: ibn.instance.channels };
            out.push(LayerRecord::new(format!("{name}.IN"), group, kind, hw));
            let kind = LayerKind::BatchNorm { channels: ibn.batch.channels };
            out.push(LayerRecord::new(format!("{name}.BN"), group, kind, hw));
        }
    }
}

impl Bottleneck {
    /// Appends this block's layers; returns the output spatial size.
    pub fn describe(&self, prefix: &str, group: ParamGroup, hw: (usize, usize), out: &mut Vec<LayerRecord>) -> Result<(usize, usize)> {
        let bn = |c: usize| LayerKind::BatchNorm { channels: c };
        out.push(LayerRecord::new(format!("{prefix}.conv1"), group, LayerKind::Conv(self.conv1.cfg), hw));
        norm_records(&self.bn1, format!("{prefix}.bn1"), group, hw, out);
        let hw2 = match &self.conv2 {
            Mixer::Conv(c) => {
                out.push(LayerRecord::new(format!("{prefix}.conv2"), group, LayerKind::Conv(c.cfg), hw));
                c.cfg.out_hw(hw.0, hw.1)?
            }
            Mixer::Attention(a) => {
                out.push(LayerRecord::new(format!("{prefix}.conv2"), group, LayerKind::Attention(a.cfg), hw));
                hw
            }
        };
        out.push(LayerRecord::new(format!("{prefix}.bn2"), group, bn(self.cfg.mid_channels), hw2));
        out.push(LayerRecord::new(format!("{prefix}.conv3"), group, LayerKind::Conv(self.conv3.cfg), hw2));
        out.push(LayerRecord::new(format!("{prefix}.bn3"), group, bn(self.cfg.out_channels), hw2));
        if let Some((c, _)) = &self.downsample {
            out.push(LayerRecord::new(format!("{prefix}.downsample.0"), group, LayerKind::Conv(c.cfg), hw));
            out.push(LayerRecord::new(format!("{prefix}.downsample.1"), group, bn(self.cfg.out_channels), hw2));
        }
        Ok(hw2)
    }
}

impl Stage {
    pub fn describe(&self, prefix: &str, group: ParamGroup, hw: (usize, usize), out: &mut Vec<LayerRecord>) -> Result<(usize, usize)> {
        let mut hw = hw;
        for (i, b) in self.blocks.iter().enumerate() {
            hw = b.describe(&format!("{prefix}.{i}"), group, hw, out)?;
        }
        Ok(hw)
    }
}

impl Trunk {
    pub fn describe(&self, input_size: usize, out: &mut Vec<LayerRecord>) -> Result<(usize, usize)> {
        let g = ParamGroup::Trunk;
        let hw = (input_size, input_size);
        out.push(LayerRecord::new("conv1", g, LayerKind::Conv(self.conv1.cfg), hw));
        let hw = self.conv1.cfg.out_hw(hw.0, hw.1)?;
        out.push(LayerRecord::new("bn1", g, LayerKind::BatchNorm { channels: self.bn1.channels }, hw));
        out.push(LayerRecord::new("maxpool", g, LayerKind::MaxPool { channels: self.bn1.channels }, hw));
        let mut hw = MaxPool::out_hw(hw.0, hw.1);
        for (i, l) in self.layers.iter().enumerate() {
            hw = l.describe(&format!("layer{}", i + 1), g, hw, out)?;
        }
        Ok(hw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &Tensor, b: &Tensor) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| *x as f64 * *y as f64).sum()
    }

    /// Compares `backward` against central differences of `sum(r * f(x))`.
    fn check<F, B>(store: &mut ParamStore, names: &[&str], x: &Tensor, input_grad: bool, mut fwd: F, mut bwd: B)
    where
        F: FnMut(&mut ParamStore, &Tensor) -> Tensor,
        B: FnMut(&mut ParamStore, &Tensor) -> Tensor,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let y = fwd(store, x);
        let r = Tensor::randn(y.shape(), 1.0, &mut rng);
        let h = 5e-4f32;
        // Rounding noise of an f32 forward pass, propagated through the difference quotient.
        let floor = 2e-7 * y.data().iter().zip(r.data()).map(|(a, b)| (a * b).abs() as f64).sum::<f64>() / h as f64;
        let tol = |numeric: f64| 2e-2 * numeric.abs() + floor.max(2e-2);
        store.zero_grad();
        let dx = bwd(store, &r);
        let grads = store.clone();
        let mut probe = |store: &mut ParamStore, name: &str, i: usize, analytic: f64| {
            let orig = store.get(name).unwrap().value[i];
            store.get_mut(name).unwrap().value[i] = orig + h;
            let lp = dot(&fwd(store, x), &r);
            store.get_mut(name).unwrap().value[i] = orig - h;
            let lm = dot(&fwd(store, x), &r);
            store.get_mut(name).unwrap().value[i] = orig;
            let numeric = (lp - lm) / (2.0 * h as f64);
            assert!(
                (numeric - analytic).abs() < tol(numeric),
                "{name}[{i}]: numeric {numeric} vs analytic {analytic}"
            );
        };
        for name in names {
            let slot = grads.get(name).unwrap();
            for k in 0..3 {
                let i = (k * 7919 + 5) % slot.numel();
                probe(store, name, i, slot.grad[i] as f64);
            }
        }
        for k in (0..4).filter(|_| input_grad) {
            let i = (k * 104_729 + 3) % x.len();
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let lp = dot(&fwd(store, &xp), &r);
            xp.data_mut()[i] -= 2.0 * h;
            let lm = dot(&fwd(store, &xp), &r);
            let numeric = (lp - lm) / (2.0 * h as f64);
            let analytic = dx.data()[i] as f64;
            assert!((numeric - analytic).abs() < tol(numeric), "x[{i}]: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn bottleneck_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = BottleneckConfig {
            in_channels: 8,
            mid_channels: 8,
            out_channels: 16,
            stride: 2,
            groups: 2,
            ibn: true,
            attention: None,
        };
        let block = std::cell::RefCell::new(Bottleneck::new(&mut store, &Scope::new("b", ParamGroup::Trunk), cfg, &mut rng).unwrap());
        let x = Tensor::randn(&[3, 8, 6, 6], 1.0, &mut rng);
        check(
            &mut store,
            &["b.conv1.weight", "b.bn1.IN.weight", "b.bn1.BN.bias", "b.conv2.weight", "b.bn3.weight", "b.downsample.0.weight"],
            &x,
            true,
            |s, x| block.borrow_mut().forward_train(s, x).unwrap(),
            |s, dy| block.borrow_mut().backward(s, dy).unwrap(),
        );
    }

    #[test]
    fn stem_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mut t = Trunk::new(&mut store, &Scope::new("", ParamGroup::Trunk), 4, true, &mut rng).unwrap();
        t.layers.clear();
        let trunk = std::cell::RefCell::new(t);
        let x = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut rng);
        check(
            &mut store,
            &["conv1.weight", "bn1.weight", "bn1.bias"],
            &x,
            false,
            |s, x| trunk.borrow_mut().forward_train(s, x, 16).unwrap(),
            |s, dy| {
                trunk.borrow_mut().backward(s, dy).unwrap();
                Tensor::zeros(&[0])
            },
        );
    }

    #[test]
    fn trunk_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let trunk = std::cell::RefCell::new(Trunk::new(&mut store, &Scope::new("", ParamGroup::Trunk), 4, true, &mut rng).unwrap());
        let x = Tensor::randn(&[4, 3, 64, 64], 1.0, &mut rng);
        check(
            &mut store,
            &["layer2.3.conv3.weight", "layer3.0.downsample.0.weight", "layer3.2.conv2.weight", "layer3.5.conv3.weight"],
            &x,
            false,
            |s, x| trunk.borrow_mut().forward_train(s, x, 64).unwrap(),
            |s, dy| {
                trunk.borrow_mut().backward(s, dy).unwrap();
                Tensor::zeros(&[0])
            },
        );
    }
}
