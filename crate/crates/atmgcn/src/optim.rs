//! AdamW with decoupled weight decay, and the exponential learning-rate
//! schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default decay ratio: the learning rate falls two decades over 50 epochs.
pub fn default_lr_decay() -> f64 {
    10f64.powf(-2.0 / 50.0)
}

/// `lr0 * decay^epoch`.
pub fn lr_schedule(epoch: usize, lr0: f64, decay: f64) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// Decoupled-weight-decay Adam. Moments are lazily shaped on the first step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step_count: u32,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps,
            weight_decay,
            step_count: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// beta1=0.9, beta2=0.999, eps=1e-8 and the given weight decay.
    pub fn with_decay(weight_decay: f64) -> Self {
        AdamW::new(0.9, 0.999, 1e-8, weight_decay)
    }

    /// One update over named parameters and their gradients:
    /// `p ← p - lr * m̂/(√v̂ + ε) - lr * wd * p`.
    ///
    /// A non-finite gradient aborts the step, naming the parameter.
    pub fn step(
        &mut self,
        params: &mut [(&str, &mut Tensor)],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Usage(format!(
                "{} parameters with {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        for ((name, p), g) in params.iter().zip(grads.iter()) {
            if p.shape() != g.shape() {
                return Err(Error::Train(format!(
                    "gradient shape {:?} for parameter '{name}' of shape {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::Train(format!(
                    "non-finite gradient for parameter '{name}'"
                )));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);

        for (idx, ((_, p), g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data().iter())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv = *pv - lr * m_hat / (v_hat.sqrt() + self.eps) - lr * self.weight_decay * *pv;
            }
        }
        Ok(())
    }
}
