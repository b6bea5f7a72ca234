use serde::{Deserialize, Serialize};

use crate::error::{Result, VkbError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-tensor moment estimates; allocated lazily on first update.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    t: u64,
}

/// Fails on the first non-finite gradient, naming its tensor.
pub fn check_finite(grads: &[Option<Tensor>], names: &[String]) -> Result<()> {
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("tensor {i}"));
                return Err(VkbError::NonFiniteGradient(name));
            }
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads.iter().flatten().map(Tensor::squared_norm).sum::<f64>().sqrt()
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![None; n],
            v: vec![None; n],
            t: 0,
        }
    }

    /// Applies one update to every trainable tensor with a gradient, after
    /// clipping the global norm to `clip` (0 disables). Returns the pre-clip norm.
    pub fn step(
        &mut self,
        opt: Optimizer,
        tensors: &mut [Tensor],
        trainable: &[bool],
        grads: &[Option<Tensor>],
        lr: f64,
        clip: f64,
    ) -> f64 {
        if self.m.len() < tensors.len() {
            self.m.resize(tensors.len(), None);
            self.v.resize(tensors.len(), None);
        }
        let norm = global_norm(grads);
        let factor = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        self.t += 1;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !trainable[i] {
                continue;
            }
            let w = tensors[i].data_mut();
            match opt {
                Optimizer::Sgd => {
                    for (x, d) in w.iter_mut().zip(g.data()) {
                        *x -= lr * factor * d;
                    }
                }
                Optimizer::Adam { beta1, beta2, eps } => {
                    let (r, c) = g.shape();
                    let m = self.m[i].get_or_insert_with(|| Tensor::zeros(r, c)).data_mut();
                    let v = self.v[i].get_or_insert_with(|| Tensor::zeros(r, c)).data_mut();
                    let bc1 = 1.0 - beta1.powi(self.t as i32);
                    let bc2 = 1.0 - beta2.powi(self.t as i32);
                    for j in 0..w.len() {
                        let d = g.data()[j] * factor;
                        m[j] = beta1 * m[j] + (1.0 - beta1) * d;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * d * d;
                        let mh = m[j] / bc1;
                        let vh = v[j] / bc2;
                        w[j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        norm
    }
}
