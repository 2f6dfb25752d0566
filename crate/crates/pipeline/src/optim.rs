//! Adam optimizer over a [`ParamStore`].
//!
//! Moment buffers are kept per parameter inside the optimizer, so the store
//! itself stays a plain name -> tensor map (what checkpoints persist).

use ndarray::ArrayD;

use crate::autodiff::Tensor;
use crate::layers::{Binding, ParamStore};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(cfg: AdamConfig, ps: &ParamStore) -> Self {
        let m = ps.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        let v = ps.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        Self { cfg, m, v, t: 0 }
    }

    /// Applies one update using the gradients produced by a backward pass
    /// over a graph in which `bind` bound this store's parameters.
    /// Parameters whose gradient is absent (unreached) are left untouched.
    pub fn step(&mut self, ps: &mut ParamStore, bind: &Binding, grads: &[Option<Tensor>]) {
        self.t += 1;
        let bc1 = 1.0 - self.cfg.beta1.powi(self.t);
        let bc2 = 1.0 - self.cfg.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.lr, self.cfg.eps);
        for (idx, (id, p)) in ps.iter_mut().enumerate() {
            let Some(grad) = grads[bind.node(id).index()].as_ref() else {
                continue;
            };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            m.zip_mut_with(grad, |mv, gv| *mv = b1 * *mv + (1.0 - b1) * gv);
            v.zip_mut_with(grad, |vv, gv| *vv = b2 * *vv + (1.0 - b2) * gv * gv);
            for ((pv, mv), vv) in p.value.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
