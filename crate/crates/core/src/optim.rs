//! AdamW with decoupled weight decay over one or more [`ParamSet`]s.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    /// Completed update count, used for bias correction.
    pub t: u64,
    pub(crate) m: Vec<Vec<Array2<f64>>>,
    pub(crate) v: Vec<Vec<Array2<f64>>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, sets: &[&ParamSet]) -> Self {
        let zeros = |s: &ParamSet| -> Vec<Array2<f64>> {
            s.iter().map(|p| Array2::zeros(p.value.dim())).collect()
        };
        Self {
            cfg,
            t: 0,
            m: sets.iter().map(|s| zeros(s)).collect(),
            v: sets.iter().map(|s| zeros(s)).collect(),
        }
    }

    /// One update with learning rate `lr`; `grads[k][i]` belongs to parameter
    /// `i` of set `k`. Fixed parameters are left untouched.
    pub fn step(&mut self, sets: &mut [&mut ParamSet], grads: &[Vec<Array2<f64>>], lr: f64) {
        assert_eq!(sets.len(), self.m.len());
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, set) in sets.iter_mut().enumerate() {
            for (i, p) in set.iter_mut().enumerate() {
                if !p.trainable {
                    continue;
                }
                let decay = if p.decay { c.weight_decay } else { 0.0 };
                Zip::from(&mut p.value)
                    .and(&mut self.m[k][i])
                    .and(&mut self.v[k][i])
                    .and(&grads[k][i])
                    .for_each(|w, m, v, &g| {
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let mhat = *m / bc1;
                        let vhat = *v / bc2;
                        *w -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *w);
                    });
            }
        }
    }
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm(grads: &[Vec<Array2<f64>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<Array2<f64>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
