//! Adaptive-moment optimizer with decoupled weight decay and a cosine
//! learning-rate schedule.

use std::collections::{BTreeMap, HashMap};

use crate::error::{CkdaError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Matrices decay;
    /// vectors (biases, norm scales, embeddings of rank 1) do not.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (name, gr) in grads {
            let p = params.get_mut(name)?;
            if p.shape() != gr.shape() {
                return Err(CkdaError::shape(format!("gradient of {name}"), p.shape(), gr.shape()));
            }
            let n = p.len();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let decay = if p.ndim() >= 2 { self.weight_decay } else { 0.0 };
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(gr.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w -= lr * (mh / (vh.sqrt() + self.eps) + decay * *w);
            }
        }
        Ok(())
    }
}

/// Learning rate at `step` of `total` under cosine decay from `base` to 0.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let frac = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
}
