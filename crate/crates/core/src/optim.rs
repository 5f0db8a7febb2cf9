//! AdamW with decoupled weight decay. Norm gains/biases and other
//! one-dimensional parameters are excluded from decay.

use alloc::vec::Vec;

use crate::nn::{ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    decay_mask: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &ParamSet, lr: f64, weight_decay: f64) -> Self {
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        let mut decay_mask = Vec::with_capacity(params.len());
        for (_, name, value) in params.iter() {
            m.push(Tensor::zeros(value.rows(), value.cols()));
            v.push(Tensor::zeros(value.rows(), value.cols()));
            let skip = name.ends_with(".bias")
                || name.ends_with(".gamma")
                || name.ends_with(".beta");
            decay_mask.push(!skip);
        }
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
            decay_mask,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Apply one update from (param, gradient) pairs. Parameters without a
    /// gradient this step keep their moments untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (id, grad) in grads {
            let idx = id.index();
            let p = params.get_mut(*id);
            assert_eq!(p.shape(), grad.shape(), "gradient shape");
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let decay = if self.decay_mask[idx] {
                self.weight_decay
            } else {
                0.0
            };
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *pv -= self.lr * decay * *pv;
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
    }

    /// Serializable optimizer state: (step, first moments, second moments).
    pub fn state(&self) -> (u64, &[Tensor], &[Tensor]) {
        (self.step, &self.m, &self.v)
    }

    pub fn restore_state(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) {
        assert_eq!(m.len(), self.m.len(), "moment count");
        assert_eq!(v.len(), self.v.len(), "moment count");
        self.step = step;
        self.m = m;
        self.v = v;
    }
}
