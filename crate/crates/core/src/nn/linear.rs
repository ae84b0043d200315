use rand::Rng;

use super::param::{ParamId, ParamStore, Scope};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Bias-free linear map `y = x W^T`, the re-id classifier layer.
#[derive(Debug)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    cache: Option<Tensor>,
}

impl Linear {
    /// Normal(0, 0.001) init as in the bag-of-tricks classifier.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        scope: &Scope,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Self {
        let w = Tensor::randn(&[out_features, in_features], 0.001, rng).into_data();
        let weight = store.param(scope.name("weight"), &[out_features, in_features], w, scope.group);
        Self { in_features, out_features, weight, cache: None }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let (n, f) = x.dims2()?;
        if f != self.in_features {
            return Err(Error::Shape(format!("linear expects {} features, got {f}", self.in_features)));
        }
        let mut y = Tensor::zeros(&[n, self.out_features]);
        gemm(n, self.out_features, f, 1.0, x.data(), false, store.value(self.weight), true, 0.0, y.data_mut());
        Ok(y)
    }

    pub fn forward_train(&mut self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let y = self.forward(store, x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, store: &mut ParamStore, dy: &Tensor) -> Result<Tensor> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::Shape("linear backward without cached forward".into()))?;
        let (n, f) = x.dims2()?;
        let o = self.out_features;
        let (w, wgrad) = store.value_and_grad(self.weight);
        gemm(o, f, n, 1.0, dy.data(), true, x.data(), false, 1.0, wgrad);
        let mut dx = Tensor::zeros(&[n, f]);
        gemm(n, f, o, 1.0, dy.data(), false, w, false, 0.0, dx.data_mut());
        Ok(dx)
    }
}
