use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::gradcheck::Differentiable;
use super::layers::{
    backward_into, forward_layer, BnStats, CacheData, Layer, LayerCache, Mode, BN_MOMENTUM,
};
use super::params::ParamStore;
use super::tensor::Tensor1d;
use crate::error::{Error, Result};

/// A chain of layers with its own parameters.
#[derive(Debug, Clone)]
pub struct Sequential {
    pub layers: Vec<Layer>,
    pub params: ParamStore,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in &layers {
            l.spec.validate()?;
            l.init_params(&mut params, &mut rng);
        }
        Ok(Self { layers, params })
    }

    pub fn forward(&self, x: &Tensor1d, mode: Mode) -> Result<(Tensor1d, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            let (y, c) = forward_layer(l, &self.params, &h, mode)?;
            caches.push(c);
            h = y;
        }
        Ok((h, caches))
    }

    pub fn backward(&self, caches: &[LayerCache], dy: &Tensor1d) -> Result<(Tensor1d, ParamStore)> {
        if caches.len() != self.layers.len() {
            return Err(Error::State(format!(
                "{} caches for {} layers",
                caches.len(),
                self.layers.len()
            )));
        }
        let mut grads = ParamStore::new();
        let mut g = dy.clone();
        for (l, c) in self.layers.iter().zip(caches).rev() {
            g = backward_into(l, &self.params, c, &g, &mut grads)?;
        }
        Ok((g, grads))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }
}

/// Blends the mean of per-item batch statistics into the running estimates:
/// `running = momentum · running + (1 − momentum) · batch`.
pub fn update_running_stats(params: &mut ParamStore, batch: &[Vec<BnStats>]) -> Result<()> {
    let Some(first) = batch.first() else {
        return Ok(());
    };
    let n = batch.len() as f64;
    for (k, s) in first.iter().enumerate() {
        let mut mean = vec![0.0; s.mean.len()];
        let mut var = vec![0.0; s.var.len()];
        for item in batch {
            let t = item
                .get(k)
                .filter(|t| t.layer == s.layer)
                .ok_or_else(|| Error::State("batch items disagree on BN layers".into()))?;
            for (a, b) in mean.iter_mut().zip(&t.mean) {
                *a += b / n;
            }
            for (a, b) in var.iter_mut().zip(&t.var) {
                *a += b / n;
            }
        }
        for (field, new) in [("running_mean", mean), ("running_var", var)] {
            let p = params.get_mut(&format!("{}.{field}", s.layer))?;
            for (r, v) in p.data.iter_mut().zip(new) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }
    Ok(())
}

/// Signs of every ReLU and ELU pre-activation. ELU is only C¹ at zero, so a
/// finite difference across it loses an order of accuracy.
pub fn kink_pattern(caches: &[LayerCache]) -> Vec<bool> {
    let mut out = Vec::new();
    for c in caches {
        match &c.data {
            CacheData::Relu { x } | CacheData::Elu { x, .. } => {
                out.extend(x.data().iter().map(|v| *v > 0.0))
            }
            _ => {}
        }
    }
    out
}

impl Differentiable for Sequential {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn forward_train(&self, x: &Tensor1d) -> Result<Tensor1d> {
        Ok(self.forward(x, Mode::Train)?.0)
    }

    fn gradients(&self, x: &Tensor1d, dy: &Tensor1d) -> Result<(Tensor1d, ParamStore)> {
        let (_, caches) = self.forward(x, Mode::Train)?;
        self.backward(&caches, dy)
    }

    fn kink_pattern(&self, x: &Tensor1d) -> Result<Vec<bool>> {
        let (_, caches) = self.forward(x, Mode::Train)?;
        Ok(kink_pattern(&caches))
    }
}
