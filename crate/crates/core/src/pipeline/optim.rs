use crate::error::{Error, Result};
use crate::numerics::{Float, Gradients, ParamStore, Tensor};

/// `eta_min + (lr - eta_min) (1 + cos(pi epoch / t_max)) / 2`.
pub fn cosine_lr(base: f64, eta_min: f64, t_max: usize, epoch: usize) -> f64 {
    let t = epoch as f64 / t_max.max(1) as f64;
    eta_min + (base - eta_min) * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
}

/// Adam with decoupled weight decay. Moments are stored per parameter in
/// store order.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(store: &ParamStore<T>, weight_decay: f64) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: zeros(), v: zeros() }
    }

    /// One update at learning rate `lr`. Parameters without a gradient are
    /// left untouched.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if self.m.len() != store.params().len() {
            return Err(Error::Usage(format!(
                "optimizer holds {} moment tensors for {} parameters",
                self.m.len(),
                store.params().len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::c(self.beta1), T::c(self.beta2));
        let (c1, c2) = (T::c(1.0 - self.beta1.powi(t)), T::c(1.0 - self.beta2.powi(t)));
        let (lr_t, eps) = (T::c(lr), T::c(self.eps));
        let decay = T::c(1.0 - lr * self.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.param(id) else { continue };
            let g = g.data();
            let p = store.param_mut(id).value.data_mut();
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] = p[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
